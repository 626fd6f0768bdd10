//! Small perceptrons, point-set encoders, and token embeddings used by the
//! grasp generator and refiner.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::guidance::VERBS;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered, named parameter tensors. Order is the wire format of
/// checkpoints and the binding order of tape leaves.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.entries.push((name.to_string(), t));
        self.entries.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            assert_eq!(slot.shape(), t.shape(), "parameter shape changed");
            *slot = t;
        }
    }

    /// Bind every parameter as a gradient-tracked leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect()
    }

    /// Bind every parameter as a constant (inference paths).
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// Collect gradients in entry order; parameters untouched by the loss
    /// get zero gradients.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), v)| match tape.grad(*v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Xavier-uniform init.
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::matrix(rows, cols, data)
}

/// Fully connected stack with silu activations between layers. The first
/// layer is built by the caller (inputs are summed feature blocks); this
/// holds the hidden stack `in -> hidden -> ... -> out`.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    /// Parameter indices of (weight, bias) pairs inside the owning set.
    pub layers: Vec<(usize, usize)>,
}

impl MlpSpec {
    /// Register layers `dims[0] -> dims[1] -> ...` in `params` under
    /// `prefix/w{i}`, `prefix/b{i}`. Set `zero_last` to zero-init the final
    /// layer (residual heads start as the identity).
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> MlpSpec {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let w = if zero_last && last {
                Tensor::zeros(&[dims[i], dims[i + 1]])
            } else {
                xavier(dims[i], dims[i + 1], rng)
            };
            let wi = params.push(&format!("{prefix}/w{i}"), w);
            let bi = params.push(&format!("{prefix}/b{i}"), Tensor::zeros(&[dims[i + 1]]));
            layers.push((wi, bi));
        }
        MlpSpec { dims: dims.to_vec(), layers }
    }

    /// Forward over a bound parameter list: silu between layers, linear out.
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Var {
        let mut h = x;
        for (i, (wi, bi)) in self.layers.iter().enumerate() {
            let hw = tape.matmul(h, vars[*wi]);
            h = tape.add(hw, vars[*bi]);
            if i + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        h
    }
}

/// Permutation-invariant point-set encoder: shared per-point perceptron
/// followed by a max pool over each group of `group_size` rows.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub mlp: MlpSpec,
    pub group_size: usize,
}

impl PointEncoder {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        hidden: usize,
        feat: usize,
        group_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mlp = MlpSpec::register(params, prefix, &[3, hidden, feat], false, rng);
        PointEncoder { mlp, group_size }
    }

    /// `points` is [G * group_size, 3]; returns [G, feat].
    pub fn forward(&self, tape: &mut Tape, points: Var, vars: &[Var]) -> Var {
        let mut h = points;
        for (i, (wi, bi)) in self.mlp.layers.iter().enumerate() {
            let hw = tape.matmul(h, vars[*wi]);
            h = tape.add(hw, vars[*bi]);
            if i + 1 < self.mlp.layers.len() {
                h = tape.silu(h);
            }
        }
        tape.max_pool_groups(h, self.group_size)
    }
}

/// Token vocabulary over object part names plus a "no contact" token.
#[derive(Clone, Debug, PartialEq)]
pub struct PartVocab {
    pub parts: Vec<String>,
}

impl PartVocab {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut parts: Vec<String> = Vec::new();
        for obj in &ds.objects {
            for p in obj.part_names() {
                if !parts.contains(p) {
                    parts.push(p.clone());
                }
            }
        }
        parts.sort();
        PartVocab { parts }
    }

    /// Token count including the trailing "none" token.
    pub fn len(&self) -> usize {
        self.parts.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, part: Option<&str>) -> Result<usize> {
        match part {
            None => Ok(self.parts.len()),
            Some(p) => self
                .parts
                .iter()
                .position(|x| x == p)
                .ok_or_else(|| Error::Contract(format!("part '{p}' not in vocabulary"))),
        }
    }

    pub fn encode(&self) -> String {
        self.parts.join(",")
    }

    pub fn decode(s: &str) -> Self {
        PartVocab {
            parts: if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(|p| p.to_string()).collect()
            },
        }
    }
}

pub fn verb_token(verb: &str) -> Result<usize> {
    VERBS
        .iter()
        .position(|v| *v == verb)
        .ok_or_else(|| Error::Contract(format!("verb '{verb}' not in vocabulary")))
}

/// Sinusoidal embedding table for steps 0..=t_max, width `dim`.
pub fn time_embedding_table(t_max: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "time embedding width must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity((t_max + 1) * dim);
    for t in 0..=t_max {
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push(((t as f64) * freq).sin());
        }
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push(((t as f64) * freq).cos());
        }
    }
    Tensor::matrix(t_max + 1, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_encoder_is_permutation_invariant() {
        let mut rng = crate::rng::stream(1, "enc");
        let mut params = ParamSet::default();
        let enc = PointEncoder::register(&mut params, "obj", 16, 24, 5, &mut rng);
        let pts: Vec<[f64; 3]> = (0..5)
            .map(|i| {
                let x = i as f64;
                [x * 0.1, (x * 0.7).sin(), -x * 0.05]
            })
            .collect();
        let mut permuted = pts.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 4);

        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let a = tape.constant(Tensor::from_rows3(&pts));
        let b = tape.constant(Tensor::from_rows3(&permuted));
        let fa = enc.forward(&mut tape, a, &vars);
        let fb = enc.forward(&mut tape, b, &vars);
        assert_eq!(tape.value(fa).data(), tape.value(fb).data());
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = crate::rng::stream(2, "mlp");
        let mut params = ParamSet::default();
        let mlp = MlpSpec::register(&mut params, "head", &[4, 8, 3], true, &mut rng);
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 4, vec![0.5; 8]));
        let y = mlp.forward(&mut tape, x, &vars);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_table_rows_are_bounded_and_distinct() {
        let table = time_embedding_table(100, 32);
        assert_eq!(table.shape(), &[101, 32]);
        assert!(table.data().iter().all(|v| v.abs() <= 1.0));
        let row = |t: usize| &table.data()[t * 32..(t + 1) * 32];
        assert_ne!(row(3), row(97));
    }

    #[test]
    fn vocab_roundtrip_and_none_token() {
        let v = PartVocab { parts: vec!["body".into(), "cap".into()] };
        assert_eq!(v.token(Some("cap")).unwrap(), 1);
        assert_eq!(v.token(None).unwrap(), 2);
        assert!(v.token(Some("wing")).is_err());
        assert_eq!(PartVocab::decode(&v.encode()), v);
    }
}
