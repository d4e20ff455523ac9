//! Convolution and batchnorm layers addressed through a [`ParameterStore`].

use pn_tensor::{Conv2dParams, Element, Tensor, Var};

use crate::error::Result;
use crate::params::{BufferId, Init, ParamGroup, ParamId, ParamSpec, ParameterStore, Session};

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub params: Conv2dParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvShape {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvShape { c_in, c_out, k, stride: 1, padding: k / 2, groups: 1, bias: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }
}

impl Conv {
    pub fn declare<T: Element>(store: &mut ParameterStore<T>, name: &str, s: ConvShape) -> Result<Conv> {
        let weight = store.declare(ParamSpec::new(
            format!("{name}.weight"),
            &[s.c_out, s.c_in / s.groups.max(1), s.k, s.k],
            ParamGroup::Decay,
            Init::TruncNormal(WEIGHT_STD),
        ))?;
        let bias = if s.bias {
            Some(store.declare(ParamSpec::new(format!("{name}.bias"), &[s.c_out], ParamGroup::NoDecay, Init::Zeros))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            c_in: s.c_in,
            c_out: s.c_out,
            k: s.k,
            params: Conv2dParams::new(s.stride, s.padding, s.groups),
        })
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight)?;
        let b = self.bias.map(|b| sess.param(b)).transpose()?;
        Ok(sess.tape.conv2d(x, w, b, self.params)?)
    }

    /// Attaches a zero bias so a folded shift has somewhere to live.
    pub fn ensure_bias<T: Element>(&mut self, store: &mut ParameterStore<T>) -> Result<ParamId> {
        if let Some(b) = self.bias {
            return Ok(b);
        }
        let name = store.spec(self.weight).name.trim_end_matches(".weight").to_string();
        let id = store.insert(
            ParamSpec::new(format!("{name}.bias"), &[self.c_out], ParamGroup::NoDecay, Init::Zeros),
            Tensor::zeros(&[self.c_out]),
        )?;
        self.bias = Some(id);
        Ok(id)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.params;
        ((h + 2 * p.padding - self.k) / p.stride + 1, (w + 2 * p.padding - self.k) / p.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn declare<T: Element>(store: &mut ParameterStore<T>, name: &str, channels: usize) -> Result<BatchNorm> {
        let gamma = store.declare(ParamSpec::new(format!("{name}.weight"), &[channels], ParamGroup::NoDecay, Init::Ones))?;
        let beta = store.declare(ParamSpec::new(format!("{name}.bias"), &[channels], ParamGroup::NoDecay, Init::Zeros))?;
        let stats = store.declare_buffer(name.to_string(), channels)?;
        Ok(BatchNorm { gamma, beta, stats, channels })
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        sess.batchnorm(x, self.gamma, self.beta, self.stats)
    }

    pub fn forward_slice<T: Element>(&self, sess: &mut Session<'_, T>, x: Var, start: usize, len: usize) -> Result<Var> {
        sess.batchnorm_slice(x, self.gamma, self.beta, self.stats, start, len)
    }

    pub fn remove<T: Element>(&self, store: &mut ParameterStore<T>) {
        store.remove(self.gamma);
        store.remove(self.beta);
        store.remove_buffer(self.stats);
    }
}

/// A convolution optionally followed by batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
}

impl ConvBn {
    pub fn declare<T: Element>(store: &mut ParameterStore<T>, name: &str, s: ConvShape) -> Result<ConvBn> {
        let conv = Conv::declare(store, &format!("{name}.conv"), s)?;
        let bn = BatchNorm::declare(store, &format!("{name}.bn"), s.c_out)?;
        Ok(ConvBn { conv, bn: Some(bn) })
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        match &self.bn {
            Some(bn) => bn.forward(sess, y),
            None => Ok(y),
        }
    }
}
