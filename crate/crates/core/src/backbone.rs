//! Hard parameter sharing network: one trunk shared by both tasks, a linear
//! regression head and a linear classification head.
//!
//! Each stock is scored independently from its own flattened feature window
//! (`window × features`, oldest day first), so a day's output is equivariant
//! under permutations of its stocks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrunkKind {
    Mlp,
    /// Elman recurrence over the window followed by any further dense layers.
    Rnn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub trunk: TrunkKind,
    /// Channels per day.
    pub features: usize,
    pub window: usize,
    /// Trunk widths; every layer uses tanh.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ArchSpec {
    pub fn mlp(features: usize, window: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            trunk: TrunkKind::Mlp,
            features,
            window,
            hidden,
            classes,
        }
    }

    pub fn input_width(&self) -> usize {
        self.features * self.window
    }

    fn validate(&self) -> Result<()> {
        if self.features == 0 || self.window == 0 {
            return Err(Error::contract("feature count and window must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(Error::contract("trunk needs at least one hidden layer"));
        }
        if let Some(pos) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::contract(format!(
                "hidden layer {pos} has zero width"
            )));
        }
        if self.classes < 2 {
            return Err(Error::contract(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Parameter partition: shared trunk vs the two task heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    RegressionHead,
    ClassificationHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub arch: ArchSpec,
    pub params: Vec<Param>,
}

/// Per-stock outputs for one day.
pub struct BatchOutput<'g> {
    /// `n×1` return scores.
    pub pred_return: Var<'g>,
    /// `n×classes`.
    pub class_logits: Var<'g>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized")
}

impl BackboneParams {
    /// Glorot-uniform weights and zero biases, drawn from `ChaCha8Rng(seed)`
    /// in declaration order.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut push = |name: String, group, value| params.push(Param { name, group, value });
        let shared = ParamGroup::Shared;

        let mut width = match arch.trunk {
            TrunkKind::Mlp => arch.input_width(),
            TrunkKind::Rnn => {
                let h = arch.hidden[0];
                push(
                    "rnn.w_in".into(),
                    shared,
                    glorot(&mut rng, arch.features, h),
                );
                push("rnn.w_rec".into(), shared, glorot(&mut rng, h, h));
                push("rnn.bias".into(), shared, Tensor::zeros(1, h));
                h
            }
        };
        let dense_from = usize::from(arch.trunk == TrunkKind::Rnn);
        for (l, &h) in arch.hidden.iter().enumerate().skip(dense_from) {
            push(
                format!("trunk.{l}.weight"),
                shared,
                glorot(&mut rng, width, h),
            );
            push(format!("trunk.{l}.bias"), shared, Tensor::zeros(1, h));
            width = h;
        }
        let reg = ParamGroup::RegressionHead;
        push("head_r.weight".into(), reg, glorot(&mut rng, width, 1));
        push("head_r.bias".into(), reg, Tensor::zeros(1, 1));
        let cls = ParamGroup::ClassificationHead;
        push(
            "head_c.weight".into(),
            cls,
            glorot(&mut rng, width, arch.classes),
        );
        push("head_c.bias".into(), cls, Tensor::zeros(1, arch.classes));
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .collect()
    }

    /// Records every parameter as a trainable leaf on `g`, in order.
    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect()
    }

    fn find(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Scores every row of `features` (`n × window·features`).
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        vars: &[Var<'g>],
        features: &Tensor,
    ) -> Result<BatchOutput<'g>> {
        let arch = &self.arch;
        if features.cols() != arch.input_width() {
            return Err(Error::Shape {
                op: "backbone input",
                lhs: features.shape(),
                rhs: (features.rows(), arch.input_width()),
            });
        }
        for r in 0..features.rows() {
            let row = &features.data()[r * features.cols()..(r + 1) * features.cols()];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite input for stock row {r}"
                )));
            }
        }
        let n = features.rows();
        let mut h = match arch.trunk {
            TrunkKind::Mlp => g.constant(features.clone()),
            TrunkKind::Rnn => {
                let w_in = vars[self.find("rnn.w_in")];
                let w_rec = vars[self.find("rnn.w_rec")];
                let bias = vars[self.find("rnn.bias")];
                let f = arch.features;
                let mut state: Option<Var<'g>> = None;
                for step in 0..arch.window {
                    let mut x = Tensor::zeros(n, f);
                    for r in 0..n {
                        for c in 0..f {
                            x.set(r, c, features.get(r, step * f + c));
                        }
                    }
                    let mut pre = g.constant(x).matmul(w_in)?.add(bias)?;
                    if let Some(s) = state {
                        pre = pre.add(s.matmul(w_rec)?)?;
                    }
                    state = Some(pre.tanh());
                }
                state.expect("window >= 1")
            }
        };
        let dense_from = usize::from(arch.trunk == TrunkKind::Rnn);
        for l in dense_from..arch.hidden.len() {
            let w = vars[self.find(&format!("trunk.{l}.weight"))];
            let b = vars[self.find(&format!("trunk.{l}.bias"))];
            h = h.matmul(w)?.add(b)?.tanh();
        }
        let pred_return = h
            .matmul(vars[self.find("head_r.weight")])?
            .add(vars[self.find("head_r.bias")])?;
        let class_logits = h
            .matmul(vars[self.find("head_c.weight")])?
            .add(vars[self.find("head_c.bias")])?;
        Ok(BatchOutput {
            pred_return,
            class_logits,
        })
    }

    /// Forward pass on plain values: `(return scores, class logits)`.
    pub fn predict(&self, features: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = self
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let out = self.forward(&g, &vars, features)?;
        Ok((out.pred_return.value().into_vec(), out.class_logits.value()))
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with(&BTreeMap::new())
    }

    /// Checkpoint text carrying `config` (the resolved experiment keys).
    pub fn to_json_with(&self, config: &BTreeMap<String, String>) -> Result<String> {
        let file = CheckpointFile {
            config: config.clone(),
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    group: p.group,
                    shape: [p.value.rows(), p.value.cols()],
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self::from_json_with(text)?.0)
    }

    /// Parameters plus the embedded experiment keys (empty if none were stored).
    pub fn from_json_with(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        let expected = Self::init(&file.arch, 0)?;
        if expected.params.len() != file.params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} arrays, architecture needs {}",
                file.params.len(),
                expected.params.len()
            )));
        }
        let mut params = Vec::with_capacity(file.params.len());
        for (want, rec) in expected.params.iter().zip(file.params) {
            if rec.name != want.name || rec.group != want.group {
                return Err(Error::data(format!(
                    "checkpoint array `{}` where `{}` expected",
                    rec.name, want.name
                )));
            }
            let value = Tensor::from_vec(rec.shape[0], rec.shape[1], rec.data)?;
            if value.shape() != want.value.shape() {
                return Err(Error::data(format!(
                    "checkpoint array `{}` has shape {:?}, expected {:?}",
                    rec.name,
                    value.shape(),
                    want.value.shape()
                )));
            }
            params.push(Param {
                name: rec.name,
                group: rec.group,
                value,
            });
        }
        Ok((
            Self {
                arch: file.arch,
                params,
            },
            file.config,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_with(config)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with(&text)
    }
}

/// Checkpoint layout: the experiment keys, the architecture and every named
/// array with its shape, values row-major.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(default)]
    config: BTreeMap<String, String>,
    arch: ArchSpec,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    data: Vec<f64>,
}
