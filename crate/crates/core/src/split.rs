//! Positional channel partition: `[0, c_p)` convolved, `[c_p, c)` attended.

use pn_tensor::ops::shape::{concat, narrow};
use pn_tensor::{Element, Tape, Tensor, Var};

use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    c_in: usize,
    c_p: usize,
}

impl SplitSpec {
    /// Any split with `1 <= c_p <= c_in`; `c_p == c_in` is a plain convolution.
    pub fn new(c_in: usize, c_p: usize) -> Result<Self> {
        if c_p == 0 || c_p > c_in {
            return config(format!("convolved channels {c_p} outside [1, {c_in}]"));
        }
        Ok(SplitSpec { c_in, c_p })
    }

    /// A split that leaves at least one channel for attention.
    pub fn attention(c_in: usize, c_p: usize) -> Result<Self> {
        if c_p >= c_in {
            return config(format!("attention split needs c_p <= {} for {c_in} channels, got {c_p}", c_in.saturating_sub(1)));
        }
        Self::new(c_in, c_p)
    }

    /// `c_p = round(c_in * ratio)`.
    pub fn from_ratio(c_in: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return config(format!("split ratio {ratio} outside (0, 1]"));
        }
        Self::new(c_in, (c_in as f64 * ratio).round() as usize)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_p(&self) -> usize {
        self.c_p
    }

    pub fn c_att(&self) -> usize {
        self.c_in - self.c_p
    }

    pub fn ratio(&self) -> f64 {
        self.c_p as f64 / self.c_in as f64
    }
}

fn check_channels(x_c: usize, spec: &SplitSpec) -> Result<()> {
    if x_c != spec.c_in {
        return config(format!("split expects {} channels, input has {x_c}", spec.c_in));
    }
    Ok(())
}

pub fn split_channels<T: Element>(x: &Tensor<T>, spec: &SplitSpec) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = x.dims4()?;
    check_channels(c, spec)?;
    Ok((narrow(x, 1, 0, spec.c_p)?, narrow(x, 1, spec.c_p, spec.c_att())?))
}

pub fn concat_channels<T: Element>(conv: &Tensor<T>, att: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(concat(&[conv, att], 1)?)
}

/// Tape version of [`split_channels`] at a runtime split point.
pub fn split_vars<T: Element>(tape: &mut Tape<T>, x: Var, c_p: usize) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    let spec = SplitSpec::new(c, c_p)?;
    let a = tape.narrow(x, 1, 0, spec.c_p)?;
    let b = tape.narrow(x, 1, spec.c_p, spec.c_att())?;
    Ok((a, b))
}
