//! The parameterized network: a rectifier MLP encoder, a linear embedding
//! layer, and a K-way softmax head producing column-stochastic probability
//! matrices. Parameters live as plain matrices and are registered as tape
//! leaves per training step via [`MlpModel::bind`].

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Widths of the stack: input d, encoder hidden layers, embedding e, K
/// output classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    weight: Matrix,
    bias: Matrix,
}

impl DenseLayer {
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut StdRng) -> DenseLayer {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        DenseLayer {
            weight: Matrix::new(out_dim, in_dim, data).expect("sized above"),
            bias: Matrix::zeros(out_dim, 1),
        }
    }
}

/// MLP with encoder layers (rectifier), one linear embedding layer, and a
/// softmax head over all K class neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: ModelConfig,
    encoder: Vec<DenseLayer>,
    embedding: DenseLayer,
    head: DenseLayer,
}

/// Tape handles for one training step, in parameter declaration order.
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    embedding: (Var, Var),
    head: (Var, Var),
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases; deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> MlpModel {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.hidden.len());
        let mut in_dim = config.input_dim;
        for &h in &config.hidden {
            encoder.push(DenseLayer::glorot(h, in_dim, &mut rng));
            in_dim = h;
        }
        let embedding = DenseLayer::glorot(config.embedding, in_dim, &mut rng);
        let head = DenseLayer::glorot(config.classes, config.embedding, &mut rng);
        MlpModel {
            config: config.clone(),
            encoder,
            embedding,
            head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in declaration order: encoder (weight, bias) pairs, then
    /// embedding, then head.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.embedding.weight);
        out.push(&self.embedding.bias);
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.embedding.weight);
        out.push(&mut self.embedding.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let encoder = self
            .encoder
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        let embedding = (
            tape.leaf(self.embedding.weight.clone()),
            tape.leaf(self.embedding.bias.clone()),
        );
        let head = (
            tape.leaf(self.head.weight.clone()),
            tape.leaf(self.head.bias.clone()),
        );
        BoundModel {
            encoder,
            embedding,
            head,
        }
    }

    /// Tape-free forward pass for inference: probabilities and embeddings.
    pub fn forward_plain(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(inputs)?;
        let mut h = inputs.clone();
        for layer in &self.encoder {
            h = affine_plain(&layer.weight, &layer.bias, &h)?.map(|v| v.max(0.0));
        }
        let z = affine_plain(&self.embedding.weight, &self.embedding.bias, &h)?;
        let logits = affine_plain(&self.head.weight, &self.head.bias, &z)?;
        let mut tape = Tape::new();
        let lv = tape.leaf(logits);
        let p = tape.softmax_columns(lv);
        Ok((tape.value(p).clone(), z))
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.rows() != self.config.input_dim {
            return Err(Error::BadShape {
                op: "forward",
                expected: "input_dim rows",
                rows: inputs.rows(),
                cols: inputs.cols(),
            });
        }
        Ok(())
    }

    /// One SGD step, theta <- theta - lr * grad, with `grads` in declaration
    /// order. A non-finite gradient rejects the whole step.
    pub fn sgd_step(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        let mut params = self.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "sgd_step: expected {} gradient matrices, got {}",
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !params[i].same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left_rows: params[i].rows(),
                    left_cols: params[i].cols(),
                    right_rows: g.rows(),
                    right_cols: g.cols(),
                });
            }
            if let Some(idx) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {i}"),
                    index: idx,
                });
            }
        }
        for (p, g) in params.iter_mut().zip(grads) {
            let updated = p.sub(&g.scale(lr)).expect("shape checked");
            **p = updated;
        }
        Ok(())
    }

    /// Decimal-text checkpoint: layer shapes then parameters in declaration
    /// order, 17 significant digits, exact round-trip.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("ncdlab-mlp v1\n");
        out.push_str(&format!("input {}\n", self.config.input_dim));
        out.push_str("hidden");
        for h in &self.config.hidden {
            out.push_str(&format!(" {h}"));
        }
        out.push('\n');
        out.push_str(&format!("embedding {}\n", self.config.embedding));
        out.push_str(&format!("classes {}\n", self.config.classes));
        for (name, m) in self.named_params() {
            out.push_str(&format!("param {} {} {}\n", name, m.rows(), m.cols()));
            for i in 0..m.rows() {
                let row: Vec<String> = (0..m.cols())
                    .map(|j| format!("{:.16e}", m.get(i, j)))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder{i}.weight"), &layer.weight));
            out.push((format!("encoder{i}.bias"), &layer.bias));
        }
        out.push(("embedding.weight".into(), &self.embedding.weight));
        out.push(("embedding.bias".into(), &self.embedding.bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<MlpModel> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != "ncdlab-mlp v1" {
            return Err(Error::Parse(format!("bad checkpoint magic: {magic}")));
        }
        let input_dim = parse_header_usize(lines.next(), "input")?;
        let hidden_line = lines
            .next()
            .ok_or_else(|| Error::Parse("missing hidden line".into()))?;
        let mut hidden_parts = hidden_line.split_whitespace();
        if hidden_parts.next() != Some("hidden") {
            return Err(Error::Parse(format!("bad hidden line: {hidden_line}")));
        }
        let hidden: Vec<usize> = hidden_parts
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Parse(format!("bad hidden width {p}")))
            })
            .collect::<Result<_>>()?;
        let embedding = parse_header_usize(lines.next(), "embedding")?;
        let classes = parse_header_usize(lines.next(), "classes")?;
        let config = ModelConfig {
            input_dim,
            hidden,
            embedding,
            classes,
        };

        let mut matrices = Vec::new();
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(Error::Parse(format!("bad param line: {line}")));
            }
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| Error::Parse("bad param rows".into()))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| Error::Parse("bad param cols".into()))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
                for v in row.split_whitespace() {
                    data.push(
                        v.parse::<f64>()
                            .map_err(|_| Error::Parse(format!("bad float {v}")))?,
                    );
                }
            }
            matrices.push(Matrix::new(rows, cols, data)?);
        }

        let expected = 2 * config.hidden.len() + 4;
        if matrices.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} parameter matrices, found {}",
                matrices.len()
            )));
        }
        let mut it = matrices.into_iter();
        let encoder = (0..config.hidden.len())
            .map(|_| DenseLayer {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        let embedding_layer = DenseLayer {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let head = DenseLayer {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let model = MlpModel {
            config,
            encoder,
            embedding: embedding_layer,
            head,
        };
        for (name, m) in model.named_params() {
            if m.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("non-finite values in {name}")));
            }
        }
        Ok(model)
    }

    /// Zero out the head layer; softmax of constant logits is uniform.
    #[doc(hidden)]
    pub fn zero_head(&mut self) {
        let (r, c) = (self.head.weight.rows(), self.head.weight.cols());
        self.head.weight = Matrix::zeros(r, c);
        self.head.bias = Matrix::zeros(r, 1);
    }
}

fn parse_header_usize(line: Option<&str>, key: &str) -> Result<usize> {
    let line = line.ok_or_else(|| Error::Parse(format!("missing {key} line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Parse(format!("expected {key} line, got: {line}")));
    }
    parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad {key} value")))
}

fn affine_plain(weight: &Matrix, bias: &Matrix, x: &Matrix) -> Result<Matrix> {
    let mut out = weight.matmul(x)?;
    for i in 0..out.rows() {
        let b = bias.get(i, 0);
        for j in 0..out.cols() {
            out.set(i, j, out.get(i, j) + b);
        }
    }
    Ok(out)
}

impl BoundModel {
    /// Graph forward pass: returns (P, Z), the column-stochastic K x B
    /// probability matrix and the e x B embedding.
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<(Var, Var)> {
        let b = tape.value(inputs).cols();
        let mut h = inputs;
        for &(w, bias) in &self.encoder {
            let wx = tape.matmul(w, h)?;
            let bb = tape.broadcast_column(bias, b)?;
            let pre = tape.add(wx, bb)?;
            h = tape.relu(pre);
        }
        let (ew, eb) = self.embedding;
        let wz = tape.matmul(ew, h)?;
        let ebb = tape.broadcast_column(eb, b)?;
        let z = tape.add(wz, ebb)?;
        let (hw, hb) = self.head;
        let wl = tape.matmul(hw, z)?;
        let hbb = tape.broadcast_column(hb, b)?;
        let logits = tape.add(wl, hbb)?;
        let p = tape.softmax_columns(logits);
        Ok((p, z))
    }

    /// Parameter handles in declaration order, matching [`MlpModel::params`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        out.push(self.embedding.0);
        out.push(self.embedding.1);
        out.push(self.head.0);
        out.push(self.head.1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP, PASS_THRESHOLD};
    use crate::losses;
    use approx::assert_relative_eq;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden: vec![8],
            embedding: 4,
            classes: 4,
        }
    }

    fn random_inputs(dim: usize, b: usize, seed: u64) -> Matrix {
        let mut rng = StdRng::seed_from_u64(seed);
        Matrix::new(
            dim,
            b,
            (0..dim * b).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        assert_eq!(MlpModel::init(&cfg, 5), MlpModel::init(&cfg, 5));
        assert_ne!(MlpModel::init(&cfg, 5), MlpModel::init(&cfg, 6));
        // d=4 -> [8] -> e=4 -> K=4: weights plus biases per layer.
        let expected = (4 * 8 + 8) + (8 * 4 + 4) + (4 * 4 + 4);
        assert_eq!(MlpModel::init(&cfg, 5).param_count(), expected);
    }

    #[test]
    fn forward_is_column_stochastic() {
        let model = MlpModel::init(&small_config(), 1);
        let x = random_inputs(4, 16, 2);
        let (p, z) = model.forward_plain(&x).unwrap();
        assert!(p.is_column_stochastic(1e-12));
        assert_eq!(z.rows(), 4);
        assert_eq!(z.cols(), 16);
    }

    #[test]
    fn zero_head_gives_uniform_columns() {
        let mut model = MlpModel::init(&small_config(), 3);
        model.zero_head();
        let (p, _) = model.forward_plain(&random_inputs(4, 5, 4)).unwrap();
        for idx in 0..p.data().len() {
            assert_relative_eq!(p.data()[idx], 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_is_per_column_independent() {
        let model = MlpModel::init(&small_config(), 7);
        let batch = random_inputs(4, 32, 8);
        let single = Matrix::new(4, 1, batch.column_slice(0)).unwrap();
        let (p_batch, _) = model.forward_plain(&batch).unwrap();
        let (p_single, _) = model.forward_plain(&single).unwrap();
        assert_eq!(p_batch.column_slice(0), p_single.column_slice(0));
    }

    #[test]
    fn graph_forward_agrees_with_plain_forward() {
        let model = MlpModel::init(&small_config(), 9);
        let x = random_inputs(4, 6, 10);
        let (p_plain, z_plain) = model.forward_plain(&x).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(x);
        let (p, z) = bound.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(p), &p_plain);
        assert_eq!(tape.value(z), &z_plain);
    }

    #[test]
    fn fresh_model_keeps_high_entropy() {
        // Balanced inputs through a fresh model: no premature collapse.
        let cfg = small_config();
        let logk = 4.0_f64.ln();
        for seed in 0..10 {
            let model = MlpModel::init(&cfg, seed);
            let x = random_inputs(4, 64, 100 + seed);
            let (p, _) = model.forward_plain(&x).unwrap();
            let h = losses::entropy_value(&p).unwrap();
            assert!(h > logk - 0.5, "seed {seed}: entropy {h} vs log K {logk}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = MlpModel::init(&small_config(), 1);
        assert!(model.forward_plain(&Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn sgd_zero_lr_keeps_parameters() {
        let mut model = MlpModel::init(&small_config(), 11);
        let reference = model.clone();
        let grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::filled(p.rows(), p.cols(), 3.0))
            .collect();
        model.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(model, reference);
    }

    #[test]
    fn sgd_on_squared_norm_scales_parameters() {
        // loss = |theta|^2 / 2 has gradient theta; lr 0.1 scales by 0.9.
        let mut model = MlpModel::init(&small_config(), 12);
        let before: Vec<Matrix> = model.params().into_iter().cloned().collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut total: Option<Var> = None;
        for &p in &bound.params() {
            let sq = tape.hadamard(p, p).unwrap();
            let s = tape.sum(sq);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        let loss = tape.scale(total.unwrap(), 0.5);
        let grads = tape.backward(loss).unwrap();
        let gvec: Vec<Matrix> = bound.params().iter().map(|v| grads.wrt(*v)).collect();
        model.sgd_step(&gvec, 0.1).unwrap();

        for (after, before) in model.params().iter().zip(&before) {
            for (a, b) in after.data().iter().zip(before.data()) {
                assert_relative_eq!(*a, 0.9 * b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut model = MlpModel::init(&small_config(), 13);
        let mut grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        grads[0].data_mut()[0] = f64::NAN;
        let err = model.sgd_step(&grads, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn ce_loss_decreases_on_fixed_batch() {
        let cfg = ModelConfig {
            input_dim: 2,
            hidden: vec![8],
            embedding: 4,
            classes: 3,
        };
        let mut model = MlpModel::init(&cfg, 17);
        let x = Matrix::from_rows(&[
            &[4.0, -4.0, 0.0, 4.1, -3.9, 0.2],
            &[0.0, 0.1, 4.0, -0.2, 0.0, 3.9],
        ]);
        let mut targets = Matrix::zeros(3, 6);
        for (j, c) in [0usize, 1, 2, 0, 1, 2].iter().enumerate() {
            targets.set(*c, j, 1.0);
        }
        let mut first = None;
        let mut last = None;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let (p, _) = bound.forward(&mut tape, xv).unwrap();
            let loss = losses::loss_ce(&mut tape, p, &targets).unwrap();
            let value = tape.scalar(loss).unwrap();
            first.get_or_insert(value);
            last = Some(value);
            let grads = tape.backward(loss).unwrap();
            let gvec: Vec<Matrix> = bound.params().iter().map(|v| grads.wrt(*v)).collect();
            model.sgd_step(&gvec, 0.5).unwrap();
        }
        let (first, last) = (first.unwrap(), last.unwrap());
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Full per-step objective through the forward pass: the weighted
        // labeled cross entropy plus the weighted unlabeled combination,
        // checked parameter matrix by parameter matrix.
        use crate::losses::{loss_ce, loss_unlabeled, LossWeights};
        use crate::multinoulli::MultinoulliSpec;

        let cfg = ModelConfig {
            input_dim: 3,
            hidden: vec![5],
            embedding: 3,
            classes: 4,
        };
        let model = MlpModel::init(&cfg, 21);
        let spec = MultinoulliSpec::new(2, vec![0.5, 0.5]).unwrap();
        let weights = LossWeights {
            ce: 1.5,
            u: 0.8,
            ..LossWeights::default()
        };
        let xl = random_inputs(3, 5, 24);
        let mut targets = Matrix::zeros(4, 5);
        for j in 0..5 {
            targets.set(j % 2, j, 1.0);
        }
        let x0 = random_inputs(3, 6, 22);
        let x1 = random_inputs(3, 6, 23);

        let n_params = model.params().len();
        for k in 0..n_params {
            let at = model.params()[k].clone();
            let model_ref = &model;
            let spec_ref = &spec;
            let err = grad_check(
                |tape, replaced| {
                    // Rebuild the graph with parameter k swapped for the
                    // perturbed leaf.
                    let mut params: Vec<Var> = model_ref
                        .params()
                        .iter()
                        .map(|m| tape.leaf((*m).clone()))
                        .collect();
                    params[k] = replaced;
                    let n_enc = model_ref.config().hidden.len();
                    let bound = BoundModel {
                        encoder: (0..n_enc)
                            .map(|i| (params[2 * i], params[2 * i + 1]))
                            .collect(),
                        embedding: (params[2 * n_enc], params[2 * n_enc + 1]),
                        head: (params[2 * n_enc + 2], params[2 * n_enc + 3]),
                    };
                    let xlv = tape.leaf(xl.clone());
                    let (pl, _) = bound.forward(tape, xlv)?;
                    let ce = loss_ce(tape, pl, &targets)?;
                    let labeled = tape.scale(ce, weights.ce);

                    let xa = tape.leaf(x0.clone());
                    let xb = tape.leaf(x1.clone());
                    let (pa, _) = bound.forward(tape, xa)?;
                    let (pb, _) = bound.forward(tape, xb)?;
                    let (lu, _) = loss_unlabeled(tape, pa, pb, spec_ref, &weights)?;
                    let unlabeled = tape.scale(lu, weights.u);
                    tape.add(labeled, unlabeled)
                },
                &at,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < PASS_THRESHOLD, "param {k}: rel err {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig {
            input_dim: 5,
            hidden: vec![7, 6],
            embedding: 3,
            classes: 4,
        };
        let model = MlpModel::init(&cfg, 31);
        let text = model.to_checkpoint();
        let back = MlpModel::from_checkpoint(&text).unwrap();
        assert_eq!(model, back);
        assert_eq!(back.to_checkpoint(), text);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(MlpModel::from_checkpoint("nonsense").is_err());
        let model = MlpModel::init(&small_config(), 1);
        let text = model.to_checkpoint();
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(MlpModel::from_checkpoint(&truncated).is_err());
    }
}
