use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Fill, Gradients, Padding, RunningStats, Tape, Tensor, Var};

use super::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of the bound leaves into each parameter's `grad`.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get(v) {
                for (acc, gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += gv;
                }
            }
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    /// Kaiming-initialized conv with "same" padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let w = Tensor::create(
            &[cout, cin, k, k],
            Fill::Kaiming {
                fan_in: cin * k * k,
            },
            seed,
        )?;
        Self::with_weight(store, name, w, bias, stride)
    }

    pub fn with_weight(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: bool,
        stride: usize,
    ) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape("conv", "weight must be Cout×Cin×k×k"));
        }
        let cout = weight.shape()[0];
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            b.var(self.weight),
            self.bias.map(|id| b.var(id)),
            self.stride,
            Padding::Same,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Binding, x: Var, mode: Mode) -> Result<Var> {
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        tape.batchnorm2d(
            x,
            b.var(self.gamma),
            b.var(self.beta),
            &mut self.stats,
            bn_mode,
            self.momentum,
            self.eps,
        )
    }
}

/// 3×3 conv (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                3,
                stride,
                false,
                seed,
            )?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Binding, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, b, x)?;
        let y = self.bn.forward(tape, b, y, mode)?;
        tape.relu(y)
    }
}

/// Fully connected layer on [B×in] rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let w = Tensor::create(&[inputs, outputs], Fill::Normal { std }, seed)?;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        tape.add_row_bias(y, b.var(self.bias))
    }
}
