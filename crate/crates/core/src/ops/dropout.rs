//! Inverted dropout: kept units are scaled by `1/p` so the mask has unit
//! expectation and inference without sampling needs no rescale.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<S = f32> {
    keep: f64,
    mask: Tensor<S>,
}

impl<S: Scalar> DropoutMask<S> {
    /// Draws one Bernoulli(`keep`) multiplier in `{0, 1/keep}` per element.
    pub fn sample(keep: f64, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        check_keep(keep)?;
        let mut mask = Tensor::zeros(dims.to_vec())?;
        if keep == 1.0 {
            mask.data_mut().fill(S::one());
        } else {
            let scale = S::from_f64_lossy(1.0 / keep);
            for m in mask.data_mut() {
                if rng.bernoulli(keep) {
                    *m = scale;
                }
            }
        }
        Ok(DropoutMask { keep, mask })
    }

    /// The all-ones mask used when sampling is off.
    pub fn identity(keep: f64, dims: &[usize]) -> Result<Self> {
        check_keep(keep)?;
        Ok(DropoutMask {
            keep,
            mask: Tensor::full(dims.to_vec(), S::one())?,
        })
    }

    pub fn keep_probability(&self) -> f64 {
        self.keep
    }

    pub fn mask(&self) -> &Tensor<S> {
        &self.mask
    }

    pub fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        input.mul(&self.mask)
    }
}

fn check_keep(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!("keep probability {keep} outside (0, 1]")));
    }
    Ok(())
}

/// Samples a fresh mask and applies it.
pub fn dropout<S: Scalar>(input: &Tensor<S>, keep: f64, rng: &mut Rng) -> Result<(Tensor<S>, DropoutMask<S>)> {
    let mask = DropoutMask::sample(keep, input.dims(), rng)?;
    Ok((mask.apply(input)?, mask))
}
