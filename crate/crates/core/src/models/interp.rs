//! Bicubic resampling of a learned positional grid.

use qalam_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Keys cubic convolution coefficient (the value most frameworks use).
const A: f64 = -0.75;

fn cubic_weights(t: f64) -> [f64; 4] {
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Per output index: four clamped source indices and their weights
/// (half-pixel centres, no corner alignment).
fn axis_taps(old: usize, new: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = old as f64 / new as f64;
    (0..new)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let w = cubic_weights(src - base);
            let idx = std::array::from_fn(|k| (base as isize - 1 + k as isize).clamp(0, old as isize - 1) as usize);
            (idx, w)
        })
        .collect()
}

/// Resamples a `G×G×D` grid (row-major, channel last) to `G'×G'×D`.
pub fn bicubic_resize_grid(grid: &[f64], old: usize, new: usize, dim: usize) -> Vec<f64> {
    assert_eq!(grid.len(), old * old * dim);
    let taps = axis_taps(old, new);
    // Rows first: [new, old, dim]
    let mut tmp = vec![0.0; new * old * dim];
    for (r, (idx, w)) in taps.iter().enumerate() {
        for c in 0..old {
            let out = &mut tmp[(r * old + c) * dim..(r * old + c + 1) * dim];
            for k in 0..4 {
                let src = &grid[(idx[k] * old + c) * dim..(idx[k] * old + c + 1) * dim];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w[k] * s;
                }
            }
        }
    }
    let mut out = vec![0.0; new * new * dim];
    for r in 0..new {
        for (c, (idx, w)) in taps.iter().enumerate() {
            let dst = &mut out[(r * new + c) * dim..(r * new + c + 1) * dim];
            for k in 0..4 {
                let src = &tmp[(r * old + idx[k]) * dim..(r * old + idx[k] + 1) * dim];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w[k] * s;
                }
            }
        }
    }
    out
}

/// Adapts a `(1 + G²)×D` embedding (class row first) to a `G'` grid.
///
/// Accepts `[1 + G², D]` or `[1, 1 + G², D]` and returns the same rank.
pub fn interpolate_positional_embeddings<T: Scalar>(
    pos: &Tensor<T>,
    old_grid: usize,
    new_grid: usize,
) -> Result<Tensor<T>> {
    if old_grid == 0 || new_grid == 0 {
        return Err(Error::InvalidSpec("grid sizes must be at least 1".into()));
    }
    let (rows, dim, batched) = match pos.shape() {
        [r, d] => (*r, *d, false),
        [1, r, d] => (*r, *d, true),
        s => return Err(Error::InvalidSpec(format!("positional embedding has shape {s:?}"))),
    };
    if rows != 1 + old_grid * old_grid {
        return Err(Error::InvalidSpec(format!(
            "positional embedding has {rows} rows, expected 1 + {old_grid}² = {}",
            1 + old_grid * old_grid
        )));
    }
    let data: Vec<f64> = pos.data().iter().map(|v| v.to_f64()).collect();
    let resized = bicubic_resize_grid(&data[dim..], old_grid, new_grid, dim);
    let mut out: Vec<T> = Vec::with_capacity((1 + new_grid * new_grid) * dim);
    out.extend_from_slice(&pos.data()[..dim]);
    out.extend(resized.into_iter().map(T::from_f64));
    let new_rows = 1 + new_grid * new_grid;
    let shape = if batched {
        vec![1, new_rows, dim]
    } else {
        vec![new_rows, dim]
    };
    Ok(Tensor::new(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_weights_sum_to_one() {
        for t in [0.0, 0.1, 0.5, 0.93] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn same_grid_is_identity_and_shapes_follow_grid() {
        let pos = Tensor::<f64>::new(vec![1, 197, 3], (0..197 * 3).map(|i| (i as f64 * 0.37).sin()).collect());
        let same = interpolate_positional_embeddings(&pos, 14, 14).unwrap();
        assert!(same.max_abs_diff(&pos) < 1e-12);
        let small = interpolate_positional_embeddings(&pos, 14, 8).unwrap();
        assert_eq!(small.shape(), &[1, 65, 3]);
        assert_eq!(&small.data()[..3], &pos.data()[..3]);
        assert!(interpolate_positional_embeddings(&pos, 13, 8).is_err());
    }

    /// Direct 16-tap evaluation of the bicubic kernel, written independently of the separable path.
    fn direct(grid: &[f64], old: usize, new: usize, r: usize, c: usize) -> f64 {
        let kernel = |x: f64| {
            let a = -0.75;
            let x = x.abs();
            if x <= 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        };
        let s = old as f64 / new as f64;
        let (sy, sx) = ((r as f64 + 0.5) * s - 0.5, (c as f64 + 0.5) * s - 0.5);
        let (by, bx) = (sy.floor() as isize, sx.floor() as isize);
        let mut acc = 0.0;
        for dy in -1..=2 {
            for dx in -1..=2 {
                let (y, x) = (by + dy, bx + dx);
                let w = kernel(sy - y as f64) * kernel(sx - x as f64);
                let yc = y.clamp(0, old as isize - 1) as usize;
                let xc = x.clamp(0, old as isize - 1) as usize;
                acc += w * grid[yc * old + xc];
            }
        }
        acc
    }

    #[test]
    fn separable_path_matches_direct_evaluation() {
        let old = 14;
        let grid: Vec<f64> = (0..old * old).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        for new in [8, 14, 20] {
            let out = bicubic_resize_grid(&grid, old, new, 1);
            for r in 0..new {
                for c in 0..new {
                    assert!((out[r * new + c] - direct(&grid, old, new, r, c)).abs() < 1e-10);
                }
            }
        }
    }
}
