//! The decomposed-prompt bank.
//!
//! Each component holds a query row `q_i`, a key row `k_i` and a value block
//! `v_i` (`L_p × d`). For an image with base feature `f`, the assembled prompt
//! is `p = Σ_i α_i v_i` with `α_i = cos(f ⊙ q_i, k_i)`. Raw cosines are used as
//! weights (no softmax), so negative weights are allowed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{norm, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptComponent {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub owner_task: u32,
    pub frozen: bool,
}

impl PromptComponent {
    /// Little-endian bytes of `q ‖ k ‖ v`, used for freeze audits.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut b = self.query.to_le_bytes();
        b.extend(self.key.to_le_bytes());
        b.extend(self.value.to_le_bytes());
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    components: Vec<PromptComponent>,
    per_task: usize,
    dim: usize,
    prompt_len: usize,
}

/// Result of assembling a prompt for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptAssembly {
    pub alphas: Vec<f64>,
    /// `L_p × d`
    pub prompt: Tensor,
    /// `M × d`; row `i` is `f ⊙ q_i`.
    pub conditioned_query: Tensor,
}

/// Tape handles of the trainable components, in component order.
#[derive(Clone, Debug, Default)]
pub struct TrainableVars {
    /// `(query, key, value)` per trainable component.
    pub components: Vec<(Var, Var, Var)>,
}

impl TrainableVars {
    pub fn flat(&self) -> Vec<Var> {
        self.components
            .iter()
            .flat_map(|&(q, k, v)| [q, k, v])
            .collect()
    }
}

/// Tape handles produced by [`PromptBank::assemble_on_tape`].
#[derive(Clone, Debug)]
pub struct AssemblyVars {
    pub prompt: Var,
    pub alphas: Vec<Var>,
    pub trainable: TrainableVars,
}

pub struct TrainableParameters<'a> {
    pub tensors: Vec<&'a Tensor>,
    pub count: usize,
}

impl PromptBank {
    pub fn new(per_task: usize, dim: usize, prompt_len: usize) -> Result<Self> {
        if per_task == 0 || dim == 0 || prompt_len == 0 {
            return Err(Error::config(
                "prompt bank: components per task, dim and prompt length must be positive",
            ));
        }
        Ok(Self {
            components: Vec::new(),
            per_task,
            dim,
            prompt_len,
        })
    }

    /// Rebuilds a bank from stored components, checking the count law.
    pub fn from_components(
        per_task: usize,
        dim: usize,
        prompt_len: usize,
        components: Vec<PromptComponent>,
    ) -> Result<Self> {
        let mut bank = Self::new(per_task, dim, prompt_len)?;
        if !components.len().is_multiple_of(per_task) {
            return Err(Error::contract(format!(
                "prompt bank: {} components is not a multiple of {per_task}",
                components.len()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            let task = (i / per_task) as u32 + 1;
            if c.owner_task != task {
                return Err(Error::contract(format!(
                    "prompt bank: component {i} owned by task {} but expected {task}",
                    c.owner_task
                )));
            }
            if c.query.shape() != [dim]
                || c.key.shape() != [dim]
                || c.value.shape() != [prompt_len, dim]
            {
                return Err(Error::Shape {
                    op: "PromptBank::from_components",
                    expected: vec![prompt_len, dim],
                    got: c.value.shape().to_vec(),
                });
            }
        }
        bank.components = components;
        Ok(bank)
    }

    pub fn components(&self) -> &[PromptComponent] {
        &self.components
    }

    pub fn per_task(&self) -> usize {
        self.per_task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.components.len() / self.per_task
    }

    /// Freezes everything, then appends `M_c` fresh trainable components for `task`.
    pub fn expand(&mut self, task: u32, seed: u64) -> Result<()> {
        let expected = self.task_count() as u32 + 1;
        if task != expected {
            return Err(Error::contract(format!(
                "prompt bank: expand for task {task}, expected task {expected}"
            )));
        }
        self.freeze_all();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.dim as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            )
        };
        for _ in 0..self.per_task {
            let component = PromptComponent {
                query: draw(&[self.dim])?,
                key: draw(&[self.dim])?,
                value: draw(&[self.prompt_len, self.dim])?,
                owner_task: task,
                frozen: false,
            };
            self.components.push(component);
        }
        Ok(())
    }

    /// Every stored value rounded to `f32`.
    pub(crate) fn round_to_f32(&mut self) {
        for c in &mut self.components {
            c.query = c.query.round_to_f32();
            c.key = c.key.round_to_f32();
            c.value = c.value.round_to_f32();
        }
    }

    pub fn freeze_all(&mut self) {
        for c in &mut self.components {
            c.frozen = true;
        }
    }

    pub fn trainable_parameters(&self) -> TrainableParameters<'_> {
        let tensors: Vec<&Tensor> = self
            .components
            .iter()
            .filter(|c| !c.frozen)
            .flat_map(|c| [&c.query, &c.key, &c.value])
            .collect();
        let count = tensors.iter().map(|t| t.len()).sum();
        TrainableParameters { tensors, count }
    }

    /// Mutable view of the trainable tensors, in the order of
    /// [`PromptBank::trainable_parameters`].
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.components
            .iter_mut()
            .filter(|c| !c.frozen)
            .flat_map(|c| [&mut c.query, &mut c.key, &mut c.value])
            .collect()
    }

    /// Records prompt assembly on `tape`. Trainable components become
    /// gradient leaves; frozen ones are constants.
    pub fn assemble_on_tape(&self, tape: &mut Tape, base_feature: &[f64]) -> Result<AssemblyVars> {
        if self.components.is_empty() {
            return Err(Error::contract("assemble_prompt: prompt bank is empty"));
        }
        if base_feature.len() != self.dim {
            return Err(Error::Shape {
                op: "assemble_prompt",
                expected: vec![self.dim],
                got: vec![base_feature.len()],
            });
        }
        let base = tape.constant(Tensor::vector(base_feature.to_vec())?);
        let mut trainable = TrainableVars::default();
        let mut alphas = Vec::with_capacity(self.components.len());
        let mut prompt: Option<Var> = None;
        for c in &self.components {
            let q = tape.leaf(c.query.clone(), !c.frozen);
            let k = tape.leaf(c.key.clone(), !c.frozen);
            let v = tape.leaf(c.value.clone(), !c.frozen);
            if !c.frozen {
                trainable.components.push((q, k, v));
            }
            let cq = tape.mul(base, q)?;
            let alpha = if norm(tape.value(cq).data()) == 0.0 || norm(c.key.data()) == 0.0 {
                tape.constant(Tensor::scalar(0.0)?)
            } else {
                tape.cosine(cq, k)?
            };
            alphas.push(alpha);
            let term = tape.scale_by(v, alpha)?;
            prompt = Some(match prompt {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(AssemblyVars {
            prompt: prompt.expect("bank is non-empty"),
            alphas,
            trainable,
        })
    }

    pub fn assemble_prompt(&self, base_feature: &[f64]) -> Result<PromptAssembly> {
        let mut tape = Tape::new();
        let vars = self.assemble_on_tape(&mut tape, base_feature)?;
        let alphas = vars
            .alphas
            .iter()
            .map(|&a| tape.value(a).item())
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| {
                c.query
                    .data()
                    .iter()
                    .zip(base_feature)
                    .map(|(q, f)| q * f)
                    .collect()
            })
            .collect();
        Ok(PromptAssembly {
            alphas,
            prompt: tape.value(vars.prompt).clone(),
            conditioned_query: Tensor::from_rows(&rows)?,
        })
    }
}
