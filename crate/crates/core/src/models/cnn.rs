//! Two-convolution network of the custom CNN family.

use qalam_nn::{init, Conv2dGeometry, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{Binder, Conv, Named};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct Cnn {
    conv1: Conv,
    conv2: Conv,
    /// Width of the flattened feature map.
    pub features: usize,
}

pub(crate) fn init_params<T: Scalar>(
    named: &mut Named<T>,
    prefix: &str,
    channels: [usize; 2],
    kernel: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut cin = 3;
    for (i, &c) in channels.iter().enumerate() {
        let fan_in = cin * kernel * kernel;
        named.insert(
            format!("{prefix}conv{}.weight", i + 1),
            init::fan_in_uniform(&[c, cin, kernel, kernel], fan_in, rng),
        );
        named.insert(format!("{prefix}conv{}.bias", i + 1), Tensor::zeros(vec![c]));
        cin = c;
    }
}

impl Cnn {
    pub fn bind<T: Scalar>(b: &Binder<T>, image: usize) -> Result<Self> {
        if !image.is_multiple_of(4) {
            return Err(Error::InvalidSpec(format!("image size {image} must be divisible by 4")));
        }
        let conv = |name: &str, cin: usize| -> Result<(Conv, usize)> {
            let shape = b.shape(&format!("{name}.weight"))?;
            let [out, c, k, k2] = shape[..] else {
                return Err(Error::InvalidSpec(format!("{name}.weight has shape {shape:?}")));
            };
            if c != cin || k != k2 || k % 2 == 0 {
                return Err(Error::InvalidSpec(format!("{name}.weight has shape {shape:?}")));
            }
            Ok((
                Conv {
                    weight: b.id(&format!("{name}.weight"))?,
                    bias: Some(b.shaped(&format!("{name}.bias"), &[out])?),
                    geometry: Conv2dGeometry::new(1, k / 2),
                },
                out,
            ))
        };
        let (conv1, c1) = conv("conv1", 3)?;
        let (conv2, c2) = conv("conv2", c1)?;
        Ok(Self {
            conv1,
            conv2,
            features: c2 * (image / 4) * (image / 4),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let n = x.shape()[0];
        let h = self.conv1.forward(g, store, x).relu().max_pool2d(2);
        let h = self.conv2.forward(g, store, h).relu().max_pool2d(2);
        h.reshape(&[n, self.features])
    }
}
