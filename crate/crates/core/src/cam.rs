use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `C × H × W` map with one pre-sigmoid channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMap {
    tensor: Tensor,
}

impl ClassActivationMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(ClassActivationMap { tensor }),
            [1, c, h, w] if *c > 0 && *h > 0 && *w > 0 => {
                let shape = [*c, *h, *w];
                Ok(ClassActivationMap {
                    tensor: tensor.reshape(&shape)?,
                })
            }
            s => Err(Error::Shape(format!("class activation map must be [C, H, W], got {s:?}"))),
        }
    }

    pub fn from_fn(classes: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let tensor = Tensor::from_fn(&[classes, height, width], |idx| {
            let k = idx / (height * width);
            let rem = idx % (height * width);
            f(k, rem / width, rem % width)
        });
        ClassActivationMap { tensor }
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Row-major pixels of one class channel.
    pub fn channel(&self, class: usize) -> &[f64] {
        let len = self.height() * self.width();
        &self.tensor.data()[class * len..(class + 1) * len]
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.channel(class)[row * self.width() + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ClassActivationMap {
            tensor: self.tensor.map(f),
        }
    }
}
