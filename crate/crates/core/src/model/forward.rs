//! Forward pass of the toy MM-DiT, recorded on an autodiff tape.
//!
//! Image latents (`C × H × W`) are cut into non-overlapping `p × p` patches
//! (row-major over the grid, channel-major inside a patch), projected to `d`
//! and offset by a fixed 2-D sinusoidal table. Text ids go through a learned
//! embedding plus learned positions. Each block modulates both streams from
//! the timestep embedding, runs joint attention over the concatenated
//! sequence, and applies a gated MLP per stream. A final modulated linear
//! head maps image tokens back to patches.

use ndarray::{Array2, Array3};

use super::config::{ModelConfig, PAD};
use super::state::{LinearIds, ModelState, StreamIds};
use super::trace::{AttentionTrace, Intervention, LayerRecord};
use crate::autodiff::{Grads, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Image-shaped latent, `C × H × W`.
pub type Latent<T> = Array3<T>;

/// Which inputs of the forward graph are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// All base parameters (adapters, if attached, stay frozen).
    Base,
    /// Only LoRA adapters.
    Lora,
}

/// Splits a latent into `hw × (p·p·C)` patch rows.
pub fn patchify<T: Real>(latent: &Latent<T>, cfg: &ModelConfig) -> Result<Mat<T>> {
    let (c, h, w) = latent.dim();
    let p = cfg.patch_size;
    if c != cfg.image_channels || h % p != 0 || w % p != 0 {
        return Err(Error::Input(format!(
            "latent {c}x{h}x{w} is not {}-channel with sides divisible by patch size {p}",
            cfg.image_channels
        )));
    }
    if h / p != cfg.grid_h || w / p != cfg.grid_w {
        return Err(Error::Input(format!(
            "latent {h}x{w} does not match the {}x{} token grid at patch size {p}",
            cfg.grid_h, cfg.grid_w
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[[row, ch * p * p + py * p + px]] = latent[[ch, gy * p + py, gx * p + px]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Mat<T>, cfg: &ModelConfig) -> Latent<T> {
    let p = cfg.patch_size;
    let c = cfg.image_channels;
    let mut out = Array3::zeros((c, cfg.image_h(), cfg.image_w()));
    for gy in 0..cfg.grid_h {
        for gx in 0..cfg.grid_w {
            let row = gy * cfg.grid_w + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[[ch, gy * p + py, gx * p + px]] = tokens[[row, ch * p * p + py * p + px]];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn check_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<()> {
    if tokens.len() != cfg.text_len {
        return Err(Error::Input(format!(
            "prompt has {} ids, expected exactly {}",
            tokens.len(),
            cfg.text_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Maps parameters onto tape leaves, honoring the gradient mode and any
/// attached LoRA adapters.
pub struct Binder<'s, T: Real> {
    state: &'s ModelState<T>,
    mode: GradMode,
    params: Vec<Option<Var>>,
    lora: Vec<Option<(Var, Var)>>,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(state: &'s ModelState<T>, mode: GradMode) -> Self {
        Binder {
            state,
            mode,
            params: vec![None; state.params.len()],
            lora: vec![None; state.lora.len()],
        }
    }

    fn param(&mut self, tape: &mut Tape<T>, id: super::state::ParamId) -> Var {
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let value = self.state.params.get(id).clone();
        let v = if self.mode == GradMode::Base {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.params[id.0] = Some(v);
        v
    }

    fn adapter(&mut self, tape: &mut Tape<T>, i: usize) -> (Var, Var) {
        if let Some(pair) = self.lora[i] {
            return pair;
        }
        let a = &self.state.lora[i];
        let pair = if self.mode == GradMode::Lora {
            (tape.param(a.down.clone()), tape.param(a.up.clone()))
        } else {
            (tape.constant(a.down.clone()), tape.constant(a.up.clone()))
        };
        self.lora[i] = Some(pair);
        pair
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: Var, ids: &LinearIds) -> Var {
        let w = self.param(tape, ids.weight);
        let b = self.param(tape, ids.bias);
        let xw = tape.matmul(x, w);
        let mut y = tape.add_row(xw, b);
        if let Some(i) = self.state.adapter_for(ids.weight) {
            let (down, up) = self.adapter(tape, i);
            let h = tape.matmul(x, down);
            let delta = tape.matmul(h, up);
            let delta = tape.scale(delta, self.state.lora[i].scale);
            y = tape.add(y, delta);
        }
        y
    }
}

/// Handles into a recorded forward pass.
pub struct ForwardGraph {
    /// Predicted velocity in patch-token layout (`hw × p·p·C`).
    pub output: Var,
    /// `[layer][head]` attention probabilities as used in the value product.
    pub attention: Vec<Vec<Var>>,
    /// `[layer][head]` pre-softmax scores.
    pub logits: Vec<Vec<Var>>,
    /// `[layer]` value projections of all tokens.
    pub values: Vec<Var>,
    params: Vec<Option<Var>>,
    lora: Vec<Option<(Var, Var)>>,
}

impl ForwardGraph {
    /// Gradients of the base parameters, indexed like the state's `ParamStore`.
    pub fn param_grads<T: Real>(&self, grads: &mut Grads<T>) -> Vec<Option<Mat<T>>> {
        self.params.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }

    /// `(down, up)` gradients per attached adapter.
    pub fn lora_grads<T: Real>(&self, grads: &mut Grads<T>) -> Vec<Option<(Mat<T>, Mat<T>)>> {
        self.lora
            .iter()
            .map(|pair| {
                pair.and_then(|(d, u)| match (grads.take(d), grads.take(u)) {
                    (Some(gd), Some(gu)) => Some((gd, gu)),
                    _ => None,
                })
            })
            .collect()
    }
}

fn modulate<T: Real>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Var {
    let scaled = tape.mul_row(x, scale);
    let y = tape.add(x, scaled);
    tape.add_row(y, shift)
}

fn gated_residual<T: Real>(tape: &mut Tape<T>, x: Var, update: Var, gate: Var) -> Var {
    let g = tape.mul_row(update, gate);
    tape.add(x, g)
}

struct Modulation {
    shift_attn: Var,
    scale_attn: Var,
    gate_attn: Var,
    shift_mlp: Var,
    scale_mlp: Var,
    gate_mlp: Var,
}

fn stream_modulation<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    cond: Var,
    ids: &StreamIds,
    d: usize,
) -> Modulation {
    let m = binder.linear(tape, cond, &ids.modulation);
    let mut parts = (0..6)
        .map(|i| tape.slice_cols(m, i * d, (i + 1) * d))
        .collect::<Vec<_>>();
    let gate_mlp = parts.pop().unwrap();
    let scale_mlp = parts.pop().unwrap();
    let shift_mlp = parts.pop().unwrap();
    let gate_attn = parts.pop().unwrap();
    let scale_attn = parts.pop().unwrap();
    let shift_attn = parts.pop().unwrap();
    Modulation {
        shift_attn,
        scale_attn,
        gate_attn,
        shift_mlp,
        scale_mlp,
        gate_mlp,
    }
}

/// Output of the joint attention sublayer recorded on a tape.
pub struct AttentionVars {
    pub image: Var,
    pub text: Var,
    pub probs: Vec<Var>,
    /// Pre-softmax scores per head.
    pub logits: Vec<Var>,
    pub values: Var,
}

/// Joint attention over `[image; text]` for one layer.
///
/// Q/K/V are projected per modality, concatenated token-wise, split into
/// heads, and `softmax(Q Kᵀ / √d_k)` weights the values. When the
/// intervention targets this layer, the image-to-text block of every head is
/// blurred along the text axis before the value product. Heads are
/// concatenated channel-wise and each stream applies its own output
/// projection.
pub fn joint_attention_vars<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    layer: usize,
    x_img: Var,
    x_txt: Var,
    intervention: &Intervention,
) -> Result<AttentionVars> {
    let cfg = &binder.state.config;
    let ids = binder.state.layout.blocks[layer];
    let (hw, l, heads) = (cfg.hw(), cfg.text_len, cfg.num_heads);
    let q_i = binder.linear(tape, x_img, &ids.image.q);
    let k_i = binder.linear(tape, x_img, &ids.image.k);
    let v_i = binder.linear(tape, x_img, &ids.image.v);
    let q_t = binder.linear(tape, x_txt, &ids.text.q);
    let k_t = binder.linear(tape, x_txt, &ids.text.k);
    let v_t = binder.linear(tape, x_txt, &ids.text.v);
    let q = tape.concat_rows(&[q_i, q_t]);
    let k = tape.concat_rows(&[k_i, k_t]);
    let v = tape.concat_rows(&[v_i, v_t]);

    let kernel = match intervention.at(layer) {
        Some(blur) => Some(blur.kernel()?.into_iter().map(T::of).collect::<Vec<T>>()),
        None => None,
    };
    let (o, probs, logits) = multihead(tape, q, k, v, heads, hw, kernel.as_deref());
    let o_img = tape.slice_rows(o, 0, hw);
    let o_txt = tape.slice_rows(o, hw, hw + l);
    let image = binder.linear(tape, o_img, &ids.image.o);
    let text = binder.linear(tape, o_txt, &ids.text.o);
    Ok(AttentionVars {
        image,
        text,
        probs,
        logits,
        values: v,
    })
}

/// Scaled dot-product attention per head over the joint sequence, with an
/// optional blur of the image-to-text block (rows `..hw`, columns `hw..`).
fn multihead<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    hw: usize,
    kernel: Option<&[T]>,
) -> (Var, Vec<Var>, Vec<Var>) {
    let (n, d) = tape.value(q).dim();
    let dk = d / heads;
    let inv_sqrt = T::of(1.0 / (dk as f64).sqrt());
    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
        let qh = tape.scale(qh, inv_sqrt);
        let kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
        let vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
        let logits = tape.matmul_nt(qh, kh);
        scores.push(logits);
        let mut a = tape.softmax(logits);
        if let Some(kernel) = kernel {
            a = tape.blur_cols(a, (0, hw), (hw, n), kernel);
        }
        probs.push(a);
        outs.push(tape.matmul(a, vh));
    }
    (tape.concat_cols(&outs), probs, scores)
}

/// Multi-head attention on already projected `Q`, `K`, `V` (`n × d` each,
/// first `hw` rows image tokens). Returns the concatenated head outputs and
/// the per-head probabilities.
pub fn attention_heads<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    num_heads: usize,
    hw: usize,
    blur: Option<&crate::perturb::BlurSpec>,
) -> Result<(Mat<T>, Vec<Mat<T>>)> {
    let (n, d) = q.dim();
    if k.dim() != (n, d) || v.dim() != (n, d) || num_heads == 0 || d % num_heads != 0 || hw > n {
        return Err(Error::Input(format!(
            "attention inputs {:?}/{:?}/{:?} incompatible with {num_heads} heads and {hw} image tokens",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let kernel = match blur {
        Some(b) => Some(b.kernel()?.into_iter().map(T::of).collect::<Vec<T>>()),
        None => None,
    };
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (o, probs, _) = multihead(&mut tape, qv, kv, vv, num_heads, hw, kernel.as_deref());
    Ok((
        tape.value(o).clone(),
        probs.iter().map(|&p| tape.value(p).clone()).collect(),
    ))
}

fn mlp<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<T>, x: Var, ids: &StreamIds) -> Var {
    let h = binder.linear(tape, x, &ids.mlp_in);
    let h = tape.gelu(h);
    binder.linear(tape, h, &ids.mlp_out)
}

/// Embeds a patch matrix into image tokens on the tape.
fn image_tokens_var<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<T>, patches: Mat<T>) -> Var {
    let patches = tape.constant(patches);
    let tokens = binder.linear(tape, patches, &binder.state.layout.patch.clone());
    let pos = tape.constant(binder.state.image_pos.clone());
    tape.add(tokens, pos)
}

fn text_tokens_var<T: Real>(tape: &mut Tape<T>, binder: &mut Binder<T>, ids: &[usize]) -> Var {
    let layout = &binder.state.layout;
    let (table_id, pos_id) = (layout.token_embedding, layout.text_pos);
    let table = binder.param(tape, table_id);
    let rows = tape.gather(table, ids);
    let pos = binder.param(tape, pos_id);
    tape.add(rows, pos)
}

/// Records the full forward pass on `tape`.
pub fn build_forward<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    x_t: &Latent<T>,
    tokens: &[usize],
    t: f64,
    intervention: &Intervention,
    mode: GradMode,
) -> Result<ForwardGraph> {
    let cfg = &state.config;
    check_t(t)?;
    check_tokens(tokens, cfg)?;
    intervention.validate()?;
    let patches = patchify(x_t, cfg)?;
    let d = cfg.model_dim;
    let mut binder = Binder::new(state, mode);
    let layout = state.layout.clone();

    let mut x_img = image_tokens_var(tape, &mut binder, patches);
    let mut x_txt = text_tokens_var(tape, &mut binder, tokens);

    let temb = tape.constant(super::state::timestep_embedding(t, d).mapv(T::of));
    let c = binder.linear(tape, temb, &layout.time_in);
    let c = tape.silu(c);
    let c = binder.linear(tape, c, &layout.time_out);
    let cond = tape.silu(c);

    let mut attention = Vec::with_capacity(cfg.num_layers);
    let mut logits = Vec::with_capacity(cfg.num_layers);
    let mut values = Vec::with_capacity(cfg.num_layers);
    for (layer, ids) in layout.blocks.iter().enumerate() {
        let m_img = stream_modulation(tape, &mut binder, cond, &ids.image, d);
        let m_txt = stream_modulation(tape, &mut binder, cond, &ids.text, d);

        let n_img = tape.layer_norm(x_img);
        let h_img = modulate(tape, n_img, m_img.shift_attn, m_img.scale_attn);
        let n_txt = tape.layer_norm(x_txt);
        let h_txt = modulate(tape, n_txt, m_txt.shift_attn, m_txt.scale_attn);

        let att = joint_attention_vars(tape, &mut binder, layer, h_img, h_txt, intervention)?;
        x_img = gated_residual(tape, x_img, att.image, m_img.gate_attn);
        x_txt = gated_residual(tape, x_txt, att.text, m_txt.gate_attn);

        let n_img = tape.layer_norm(x_img);
        let h_img = modulate(tape, n_img, m_img.shift_mlp, m_img.scale_mlp);
        let f_img = mlp(tape, &mut binder, h_img, &ids.image);
        x_img = gated_residual(tape, x_img, f_img, m_img.gate_mlp);

        let n_txt = tape.layer_norm(x_txt);
        let h_txt = modulate(tape, n_txt, m_txt.shift_mlp, m_txt.scale_mlp);
        let f_txt = mlp(tape, &mut binder, h_txt, &ids.text);
        x_txt = gated_residual(tape, x_txt, f_txt, m_txt.gate_mlp);

        attention.push(att.probs);
        logits.push(att.logits);
        values.push(att.values);
    }

    let fm = binder.linear(tape, cond, &layout.final_mod);
    let shift = tape.slice_cols(fm, 0, d);
    let scale = tape.slice_cols(fm, d, 2 * d);
    let n = tape.layer_norm(x_img);
    let h = modulate(tape, n, shift, scale);
    let output = binder.linear(tape, h, &layout.final_proj);

    Ok(ForwardGraph {
        output,
        attention,
        logits,
        values,
        params: binder.params,
        lora: binder.lora,
    })
}

fn i2t_scores<T: Real>(tape: &Tape<T>, scores: &[Var], hw: usize) -> Vec<Array2<f64>> {
    scores
        .iter()
        .map(|&s| tape.value(s).slice(ndarray::s![..hw, hw..]).mapv(|x| x.as_f64()))
        .collect()
}

/// Converts the recorded attention of a graph into an [`AttentionTrace`].
pub fn capture_trace<T: Real>(
    tape: &Tape<T>,
    graph: &ForwardGraph,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> AttentionTrace {
    let hw = cfg.hw();
    let layers = graph
        .attention
        .iter()
        .zip(&graph.logits)
        .zip(&graph.values)
        .map(|((heads, scores), &v)| LayerRecord {
            heads: heads.iter().map(|&a| tape.value(a).mapv(|x| x.as_f64())).collect(),
            i2t_logits: Some(i2t_scores(tape, scores, hw)),
            values: Some(tape.value(v).mapv(|x| x.as_f64())),
        })
        .collect();
    AttentionTrace {
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        text_len: cfg.text_len,
        layers,
        pad_mask: tokens.iter().map(|&id| id == PAD).collect(),
    }
}

/// Result of [`model_forward`].
pub struct ForwardOutput<T: Real> {
    pub velocity: Latent<T>,
    pub trace: Option<AttentionTrace>,
}

/// Predicts the velocity `v_t(x_t)`; optionally captures all attention.
pub fn model_forward<T: Real>(
    state: &ModelState<T>,
    x_t: &Latent<T>,
    tokens: &[usize],
    t: f64,
    capture: bool,
    intervention: &Intervention,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, state, x_t, tokens, t, intervention, GradMode::None)?;
    let velocity = unpatchify(tape.value(graph.output), &state.config);
    let trace = capture.then(|| capture_trace(&tape, &graph, &state.config, tokens));
    Ok(ForwardOutput { velocity, trace })
}

/// Text tokens `embedding[id_j] + position_j`.
pub fn embed_text<T: Real>(tokens: &[usize], state: &ModelState<T>) -> Result<Mat<T>> {
    check_tokens(tokens, &state.config)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(state, GradMode::None);
    let v = text_tokens_var(&mut tape, &mut binder, tokens);
    Ok(tape.value(v).clone())
}

/// Image tokens: projected patches plus the fixed 2-D position table.
pub fn embed_image<T: Real>(latent: &Latent<T>, state: &ModelState<T>) -> Result<Mat<T>> {
    let patches = patchify(latent, &state.config)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(state, GradMode::None);
    let v = image_tokens_var(&mut tape, &mut binder, patches);
    Ok(tape.value(v).clone())
}

/// Output of [`joint_attention`].
pub struct AttentionOutput<T: Real> {
    pub image: Mat<T>,
    pub text: Mat<T>,
    pub record: LayerRecord,
}

/// Evaluates the joint attention sublayer of `layer` on given stream inputs
/// (already normalized and modulated).
pub fn joint_attention<T: Real>(
    state: &ModelState<T>,
    layer: usize,
    x_img: &Mat<T>,
    x_txt: &Mat<T>,
    intervention: &Intervention,
) -> Result<AttentionOutput<T>> {
    let cfg = &state.config;
    if layer >= cfg.num_layers {
        return Err(Error::Input(format!("layer {layer} out of range")));
    }
    if x_img.dim() != (cfg.hw(), cfg.model_dim) || x_txt.dim() != (cfg.text_len, cfg.model_dim) {
        return Err(Error::Input(format!(
            "stream shapes {:?}/{:?} do not match ({}, {d})/({}, {d})",
            x_img.dim(),
            x_txt.dim(),
            cfg.hw(),
            cfg.text_len,
            d = cfg.model_dim
        )));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(state, GradMode::None);
    let xi = tape.constant(x_img.clone());
    let xt = tape.constant(x_txt.clone());
    let att = joint_attention_vars(&mut tape, &mut binder, layer, xi, xt, intervention)?;
    Ok(AttentionOutput {
        image: tape.value(att.image).clone(),
        text: tape.value(att.text).clone(),
        record: LayerRecord {
            heads: att.probs.iter().map(|&a| tape.value(a).mapv(|x| x.as_f64())).collect(),
            i2t_logits: Some(i2t_scores(&tape, &att.logits, cfg.hw())),
            values: Some(tape.value(att.values).mapv(|x| x.as_f64())),
        },
    })
}
