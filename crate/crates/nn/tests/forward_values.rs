//! Forward results against direct loop implementations.

use qalam_nn::{init, Conv2dGeometry, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < 1e-10, "index {i}: {x} vs {y}");
    }
}

#[test]
fn strided_patch_conv_matches_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (n, c, s, o, k) = (2, 3, 8, 5, 4);
    let x: Tensor<f64> = init::normal(&[n, c, s, s], 1.0, &mut r);
    let w: Tensor<f64> = init::normal(&[o, c, k, k], 1.0, &mut r);
    let g = Graph::eval();
    let y = g
        .input(x.clone())
        .conv2d(g.input(w.clone()), None, Conv2dGeometry::new(k, 0));
    let os = s / k;
    assert_eq!(y.shape(), &[n, o, os, os]);
    let mut expected = vec![0.0; n * o * os * os];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..os {
                for j in 0..os {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                acc += x.data()[((b * c + ic) * s + i * k + u) * s + j * k + v]
                                    * w.data()[((oc * c + ic) * k + u) * k + v];
                            }
                        }
                    }
                    expected[((b * o + oc) * os + i) * os + j] = acc;
                }
            }
        }
    }
    close(y.value().data(), &expected);
}

#[test]
fn five_axis_permute_matches_loops() {
    let dims = [2, 3, 2, 4, 3];
    let x = Tensor::new(
        dims.to_vec(),
        (0..dims.iter().product::<usize>()).map(|v| v as f64).collect(),
    );
    let g = Graph::eval();
    let y = g.input(x.clone()).permute(&[2, 0, 3, 1, 4]);
    assert_eq!(y.shape(), &[2, 2, 4, 3, 3]);
    let mut expected = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..4 {
                for d in 0..3 {
                    for e in 0..3 {
                        // output axes (2,0,3,1,4) of the input
                        let idx = (((b * 3 + d) * 2 + a) * 4 + c) * 3 + e;
                        expected.push(x.data()[idx]);
                    }
                }
            }
        }
    }
    close(y.value().data(), &expected);
}

#[test]
fn batched_attention_product_matches_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let q: Tensor<f64> = init::normal(&[2, 3, 4], 1.0, &mut r);
    let k: Tensor<f64> = init::normal(&[2, 5, 4], 1.0, &mut r);
    let g = Graph::eval();
    let y = g.input(q.clone()).bmm(g.input(k.clone()), false, true).softmax();
    let mut expected = Vec::new();
    for b in 0..2 {
        for i in 0..3 {
            let row: Vec<f64> = (0..5)
                .map(|j| {
                    (0..4)
                        .map(|d| q.data()[(b * 3 + i) * 4 + d] * k.data()[(b * 5 + j) * 4 + d])
                        .sum()
                })
                .collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            expected.extend(row.iter().map(|v| (v - m).exp() / z));
        }
    }
    close(y.value().data(), &expected);
}
