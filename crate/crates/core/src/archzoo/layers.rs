//! Parameterized building blocks shared by the architectures.

use crate::params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Activation, BatchNormMode, ConvGeometry, Result, Tape, Tensor, Var};

/// Per-forward state: the tape, bound parameters, pending buffer writes and
/// the inspection trace.
pub(crate) struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub updates: Vec<(ParamId, Tensor<T>)>,
    pub trace: super::Trace,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn scope(&mut self, name: &str) {
        self.tape.set_scope(name);
    }

    pub fn spatial(&mut self, name: &str, x: Var) {
        let s = self.tape.shape(x);
        let hw = [s[2], s[3]];
        self.trace.spatial.push((name.to_string(), hw));
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, i: usize, o: usize, init: Init) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            w: pb.param(&format!("{name}.weight"), &[i, o], init)?,
            b: pb.param(&format!("{name}.bias"), &[o], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.scope(&self.name);
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let per_group = if geom.groups == 1 { cin } else { 1 };
        let w = pb.param(&format!("{name}.weight"), &[cout, per_group, kernel, kernel], init)?;
        let b = if bias {
            Some(pb.param(&format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            geom,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.scope(&self.name);
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: pb.param(&format!("{name}.weight"), &[c], Init::Ones)?,
            beta: pb.param(&format!("{name}.bias"), &[c], Init::Zeros)?,
            mean: pb.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: pb.buffer(&format!("{name}.running_var"), Tensor::ones(&[c]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.scope(&self.name);
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        let eps = T::lit(BN_EPS);
        if cx.tape.is_training() {
            let mut rm = cx.store.get(self.mean).clone();
            let mut rv = cx.store.get(self.var).clone();
            let y = cx.tape.batch_norm(
                x,
                g,
                b,
                BatchNormMode::Train {
                    running_mean: rm.data_mut(),
                    running_var: rv.data_mut(),
                    momentum: T::lit(BN_MOMENTUM),
                },
                eps,
            )?;
            cx.updates.push((self.mean, rm));
            cx.updates.push((self.var, rv));
            Ok(y)
        } else {
            let store = cx.store;
            cx.tape.batch_norm(
                x,
                g,
                b,
                BatchNormMode::Eval {
                    running_mean: store.get(self.mean).data(),
                    running_var: store.get(self.var).data(),
                },
                eps,
            )
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: pb.param(&format!("{name}.weight"), &[d], Init::Ones)?,
            beta: pb.param(&format!("{name}.bias"), &[d], Init::Zeros)?,
            eps,
        })
    }

    /// Normalizes the last axis.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.scope(&self.name);
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.tape.layer_norm(x, g, b, T::lit(self.eps))
    }

    /// Normalizes the channel axis of an NCHW map.
    pub fn forward_channels<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = cx.tape.permute(x, &[0, 2, 3, 1])?;
        let h = self.forward(cx, h)?;
        cx.tape.permute(h, &[0, 3, 1, 2])
    }
}

/// Squeeze-and-excitation: GAP, bottleneck MLP with dropout, sigmoid gate.
#[derive(Clone, Debug)]
pub(crate) struct SqueezeExcite {
    pub name: String,
    pub reduce: Linear,
    pub expand: Linear,
    pub act: Activation,
    pub dropout: f64,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        squeezed: usize,
        act: Activation,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            reduce: Linear::new(pb, &format!("{name}.fc1"), channels, squeezed, Init::KaimingUniform { fan_in: channels })?,
            expand: Linear::new(pb, &format!("{name}.fc2"), squeezed, channels, Init::XavierUniform { fan_in: squeezed, fan_out: channels })?,
            act,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.scope(&self.name);
        let s = cx.tape.global_avg_pool(x)?;
        let s = self.reduce.forward(cx, s)?;
        let s = cx.tape.activation(s, self.act)?;
        let s = cx.tape.dropout(s, self.dropout)?;
        let s = self.expand.forward(cx, s)?;
        let gate = cx.tape.sigmoid(s)?;
        // f32 sigmoid saturates to exactly 0 or 1 for large |z|.
        debug_assert!(
            cx.tape.value(gate).data().iter().all(|&g| g >= T::zero() && g <= T::one()),
            "SE gate outside [0, 1] in {}",
            self.name
        );
        cx.trace.se_gates.push(gate);
        cx.scope(&self.name);
        cx.tape.channel_gate(x, gate)
    }
}
