use super::{LMConfig, LmError, Result};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

/// Pre-norm decoder-only transformer. The output projection is the token
/// embedding itself (weight tying), so it has no separate parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LMModel {
    config: LMConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;

/// Parameter offsets within one layer.
pub(crate) mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_O: usize = 4;
    pub const B_O: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_FC: usize = 8;
    pub const B_FC: usize = 9;
    pub const W_PROJ: usize = 10;
    pub const B_PROJ: usize = 11;
}

/// Names and shapes of every parameter, in storage order.
pub fn param_layout(c: &LMConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.max_seq, d]),
    ];
    for l in 0..c.n_layers {
        let shapes: [(&str, Vec<usize>); PER_LAYER] = [
            ("ln1_g", vec![d]),
            ("ln1_b", vec![d]),
            ("w_qkv", vec![d, 3 * d]),
            ("b_qkv", vec![3 * d]),
            ("w_o", vec![d, d]),
            ("b_o", vec![d]),
            ("ln2_g", vec![d]),
            ("ln2_b", vec![d]),
            ("w_fc", vec![d, 4 * d]),
            ("b_fc", vec![4 * d]),
            ("w_proj", vec![4 * d, d]),
            ("b_proj", vec![d]),
        ];
        out.extend(shapes.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
    }
    out.push(("lnf_g".to_string(), vec![d]));
    out.push(("lnf_b".to_string(), vec![d]));
    out
}

/// Leaf handles of one forward pass plus the outputs callers need.
pub struct ForwardVars {
    pub params: Vec<Var>,
    /// Final normalized hidden states, `[len, d_model]`.
    pub hidden: Var,
    /// `[len, vocab_size]`
    pub logits: Var,
}

impl LMModel {
    /// Gaussian weights with standard deviation `init_scale`, zero biases and
    /// unit layer-norm gains.
    pub fn init(config: LMConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(rng_seed).split_named("lm_init");
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (k, (name, shape)) in param_layout(&config).into_iter().enumerate() {
            let is_gain = name.ends_with("_g");
            let is_bias = shape.len() == 1 && !is_gain;
            let mut t = Tensor::zeros(&shape);
            if is_gain {
                t.data_mut().fill(1.0);
            } else if !is_bias {
                let mut rng = root.split(k as u64);
                for v in t.data_mut() {
                    *v = rng.normal() * config.init_scale;
                }
            }
            params.push(t.param());
            names.push(name);
        }
        Ok(Self { config, params, names })
    }

    pub(crate) fn from_parts(config: LMConfig, params: Vec<Tensor>) -> Self {
        let names = param_layout(&config).into_iter().map(|(n, _)| n).collect();
        Self { config, params, names }
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn layer_param(&self, layer: usize, which: usize) -> &Tensor {
        &self.params[2 + layer * PER_LAYER + which]
    }

    pub(crate) fn final_norm(&self) -> (&Tensor, &Tensor) {
        let n = self.params.len();
        (&self.params[n - 2], &self.params[n - 1])
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.config.max_seq {
            return Err(LmError::TooLong {
                len,
                max: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Dropout is applied only when
    /// `dropout_rng` is given (training mode).
    pub fn forward_tape(&self, tape: &mut Tape, ids: &[u32], mut dropout_rng: Option<&mut RngStream>) -> Result<ForwardVars> {
        self.check_len(ids.len())?;
        let c = &self.config;
        let (d, dh, len) = (c.d_model, c.head_dim(), ids.len());
        let pvars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let positions: Vec<u32> = (0..len as u32).collect();
        let p_drop = if dropout_rng.is_some() { c.dropout } else { 0.0 };
        let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => Ok(tape.dropout(x, p_drop, rng)?),
                _ => Ok(x),
            }
        };

        let tok = tape.embedding(pvars[TOK_EMB], ids)?;
        let pos = tape.embedding(pvars[POS_EMB], &positions)?;
        let mut h = tape.add(tok, pos)?;
        h = drop(tape, h)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let p = |which: usize| pvars[2 + l * PER_LAYER + which];
            let x = tape.layer_norm(h, p(slot::LN1_G), p(slot::LN1_B))?;
            let qkv = tape.matmul(x, p(slot::W_QKV))?;
            let qkv = tape.add_row(qkv, p(slot::B_QKV))?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
                let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, inv_sqrt)?;
                let a = tape.causal_softmax(s)?;
                heads.push(tape.matmul(a, v)?);
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
            let o = tape.matmul(o, p(slot::W_O))?;
            let o = tape.add_row(o, p(slot::B_O))?;
            let o = drop(tape, o)?;
            h = tape.add(h, o)?;

            let x = tape.layer_norm(h, p(slot::LN2_G), p(slot::LN2_B))?;
            let f = tape.matmul(x, p(slot::W_FC))?;
            let f = tape.add_row(f, p(slot::B_FC))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p(slot::W_PROJ))?;
            let f = tape.add_row(f, p(slot::B_PROJ))?;
            let f = drop(tape, f)?;
            h = tape.add(h, f)?;
        }
        let n = pvars.len();
        let hidden = tape.layer_norm(h, pvars[n - 2], pvars[n - 1])?;
        let logits = tape.matmul_nt(hidden, pvars[TOK_EMB])?;
        Ok(ForwardVars {
            params: pvars,
            hidden,
            logits,
        })
    }

    /// Eval-mode logits, `[len, vocab_size]` row-major.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fv = self.forward_tape(&mut tape, ids, None)?;
        Ok(tape.value(fv.logits).to_vec())
    }

    /// Log-probabilities of `ids[t]` given `ids[..t]` for `t` in
    /// `from_pos..len`.
    pub fn logprob_of(&self, ids: &[u32], from_pos: usize) -> Result<Vec<f64>> {
        if from_pos == 0 || from_pos >= ids.len() {
            return Err(LmError::Position {
                pos: from_pos,
                len: ids.len(),
            });
        }
        let mut tape = Tape::new();
        let fv = self.forward_tape(&mut tape, &ids[..ids.len() - 1], None)?;
        let rows: Vec<usize> = (from_pos - 1..ids.len() - 1).collect();
        let picked = tape.gather_rows(fv.logits, &rows)?;
        let lp = tape.log_softmax_gather(picked, &ids[from_pos..])?;
        Ok(tape.value(lp).to_vec())
    }

    /// Gradients of the leaves in `vars` after `tape.backward`, flattened in
    /// parameter order; unreached parameters contribute zeros.
    pub fn flat_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<f64> {
        flat_grads(tape, vars, &self.params)
    }

    pub fn add_flat_grads(&mut self, flat: &[f64]) {
        add_flat_grads(&mut self.params, flat)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

pub(crate) fn flat_grads(tape: &Tape, vars: &[Var], params: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.iter().map(Tensor::len).sum());
    for (v, p) in vars.iter().zip(params) {
        match tape.grad(*v) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    out
}

pub(crate) fn add_flat_grads(params: &mut [Tensor], flat: &[f64]) {
    let mut off = 0;
    for p in params.iter_mut() {
        let n = p.len();
        p.accumulate_grad(&flat[off..off + n]);
        off += n;
    }
}
