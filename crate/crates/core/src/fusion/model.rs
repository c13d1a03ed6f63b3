//! Forward pass and reverse-mode gradients of the fusion classifier.
//!
//! ```text
//! text symbols ──embed──GRU──┐
//! token boxes ──positions──GRU──┼── concat ── affine ── sigmoid
//! raster ──3x(conv s2, tanh)──GAP──affine, tanh──┘
//! ```

use super::params::{ConvParams, FusionParams, GruParams, Tensor, IMAGE_CHANNELS, KERNEL};
use super::raster::Raster;
use super::tokens::{encode_positions, reading_order, text_symbols, OcrToken, POSITION_DIM};
use super::FusionError;
use crate::metrics::BinaryLabel;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// One labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub tokens: Vec<OcrToken>,
    pub image: Raster,
    pub label: BinaryLabel,
}

/// Model-ready view of tokens and raster.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub symbols: Vec<usize>,
    pub positions: Vec<[f64; POSITION_DIM]>,
    pub image: Raster,
}

impl FusionInput {
    pub fn prepare(
        params: &FusionParams,
        tokens: &[OcrToken],
        image: &Raster,
    ) -> Result<Self, FusionError> {
        let dims = &params.dims;
        encode_positions(tokens)?;
        let mut ordered = reading_order(tokens);
        ordered.truncate(dims.max_tokens);
        let owned: Vec<OcrToken> = ordered.iter().map(|t| (*t).clone()).collect();
        let positions = encode_positions(&owned)?.into_iter().map(|p| p.0).collect();
        let symbols = text_symbols(&ordered, dims.max_text_chars);
        if image.channels != IMAGE_CHANNELS
            || image.height != dims.image_side
            || image.width != dims.image_side
        {
            return Err(FusionError::Input(format!(
                "raster is {}x{}x{}, model expects {}x{}x{}",
                image.channels, image.height, image.width, IMAGE_CHANNELS, dims.image_side, dims.image_side
            )));
        }
        Ok(FusionInput {
            symbols,
            positions,
            image: image.clone(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = m · v` for `m` of shape `[rows, cols]`.
fn matvec(m: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m.data[r * cols..(r + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mᵀ · v`.
fn matvec_t(m: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &m.data[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// `g += a ⊗ b`.
fn outer_acc(g: &mut Tensor, a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut g.data[r * cols..(r + 1) * cols];
        for (gv, bv) in row.iter_mut().zip(b) {
            *gv += ar * bv;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct GruTrace {
    inputs: Vec<Vec<f64>>,
    /// `states[0]` is the zero state; `states[t + 1]` follows input `t`.
    states: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
}

impl GruTrace {
    fn last(&self) -> &[f64] {
        self.states.last().expect("zero state always present")
    }
}

fn gru_forward(p: &GruParams, inputs: Vec<Vec<f64>>) -> GruTrace {
    let hidden = p.hidden();
    let mut trace = GruTrace {
        states: vec![vec![0.0; hidden]],
        z: Vec::with_capacity(inputs.len()),
        r: Vec::with_capacity(inputs.len()),
        n: Vec::with_capacity(inputs.len()),
        inputs,
    };
    for x in &trace.inputs {
        let h = trace.states.last().unwrap();
        let mut z = p.b[0].data.clone();
        matvec(&p.w[0], x, &mut z);
        matvec(&p.u[0], h, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = p.b[1].data.clone();
        matvec(&p.w[1], x, &mut r);
        matvec(&p.u[1], h, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut n = p.b[2].data.clone();
        matvec(&p.w[2], x, &mut n);
        matvec(&p.u[2], &rh, &mut n);
        n.iter_mut().for_each(|v| *v = v.tanh());
        let next: Vec<f64> = (0..hidden)
            .map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i])
            .collect();
        trace.z.push(z);
        trace.r.push(r);
        trace.n.push(n);
        trace.states.push(next);
    }
    trace
}

/// Back-propagates `d_last` (gradient w.r.t. the final state) through time.
/// Returns the gradient w.r.t. each input.
fn gru_backward(p: &GruParams, trace: &GruTrace, d_last: &[f64], grad: &mut GruParams) -> Vec<Vec<f64>> {
    let hidden = p.hidden();
    let steps = trace.inputs.len();
    let mut dx_all = vec![Vec::new(); steps];
    let mut dh = d_last.to_vec();
    for t in (0..steps).rev() {
        let x = &trace.inputs[t];
        let h = &trace.states[t];
        let (z, r, n) = (&trace.z[t], &trace.r[t], &trace.n[t]);
        let mut dh_prev = vec![0.0; hidden];
        let mut da_z = vec![0.0; hidden];
        let mut da_n = vec![0.0; hidden];
        for i in 0..hidden {
            let dn = dh[i] * (1.0 - z[i]);
            let dz = dh[i] * (h[i] - n[i]);
            dh_prev[i] = dh[i] * z[i];
            da_n[i] = dn * (1.0 - n[i] * n[i]);
            da_z[i] = dz * z[i] * (1.0 - z[i]);
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut d_rh = vec![0.0; hidden];
        matvec_t(&p.u[2], &da_n, &mut d_rh);
        let mut da_r = vec![0.0; hidden];
        for i in 0..hidden {
            dh_prev[i] += d_rh[i] * r[i];
            da_r[i] = d_rh[i] * h[i] * r[i] * (1.0 - r[i]);
        }
        let mut dx = vec![0.0; x.len()];
        for (gate, da) in [(0, &da_z), (1, &da_r), (2, &da_n)] {
            outer_acc(&mut grad.w[gate], da, x);
            add_into(&mut grad.b[gate].data, da);
            matvec_t(&p.w[gate], da, &mut dx);
        }
        outer_acc(&mut grad.u[0], &da_z, h);
        outer_acc(&mut grad.u[1], &da_r, h);
        outer_acc(&mut grad.u[2], &da_n, &rh);
        matvec_t(&p.u[0], &da_z, &mut dh_prev);
        matvec_t(&p.u[1], &da_r, &mut dh_prev);
        dx_all[t] = dx;
        dh = dh_prev;
    }
    dx_all
}

#[derive(Clone, Copy)]
struct Shape3 {
    c: usize,
    h: usize,
    w: usize,
}

fn conv_out_side(side: usize) -> usize {
    (side - 1) / 2 + 1
}

/// Stride-2, pad-1, 3x3 convolution followed by tanh.
fn conv_forward(p: &ConvParams, input: &[f64], s: Shape3) -> (Vec<f64>, Shape3) {
    let cout = p.bias.len();
    let o = Shape3 {
        c: cout,
        h: conv_out_side(s.h),
        w: conv_out_side(s.w),
    };
    let mut out = vec![0.0; o.c * o.h * o.w];
    for co in 0..cout {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut acc = p.bias.data[co];
                for ci in 0..s.c {
                    let wbase = (co * s.c + ci) * KERNEL * KERNEL;
                    for ky in 0..KERNEL {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            acc += p.weight.data[wbase + ky * KERNEL + kx]
                                * input[(ci * s.h + iy as usize) * s.w + ix as usize];
                        }
                    }
                }
                out[(co * o.h + oy) * o.w + ox] = acc.tanh();
            }
        }
    }
    (out, o)
}

/// Given the gradient w.r.t. the pre-activation, accumulates weight and bias
/// gradients and optionally returns the gradient w.r.t. the input.
fn conv_backward(
    p: &ConvParams,
    input: &[f64],
    s: Shape3,
    d_pre: &[f64],
    o: Shape3,
    grad: &mut ConvParams,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let mut d_in = want_input_grad.then(|| vec![0.0; input.len()]);
    for co in 0..o.c {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let g = d_pre[(co * o.h + oy) * o.w + ox];
                if g == 0.0 {
                    continue;
                }
                grad.bias.data[co] += g;
                for ci in 0..s.c {
                    let wbase = (co * s.c + ci) * KERNEL * KERNEL;
                    for ky in 0..KERNEL {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let idx = (ci * s.h + iy as usize) * s.w + ix as usize;
                            grad.weight.data[wbase + ky * KERNEL + kx] += g * input[idx];
                            if let Some(d) = d_in.as_mut() {
                                d[idx] += g * p.weight.data[wbase + ky * KERNEL + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

struct Trace {
    text: GruTrace,
    position: GruTrace,
    conv_inputs: Vec<(Vec<f64>, Shape3)>,
    conv_outputs: Vec<(Vec<f64>, Shape3)>,
    pooled: Vec<f64>,
    image_feature: Vec<f64>,
    features: Vec<f64>,
    logit: f64,
}

fn run(params: &FusionParams, input: &FusionInput) -> Trace {
    let text_inputs: Vec<Vec<f64>> = input
        .symbols
        .iter()
        .map(|&s| {
            let d = params.dims.embed_dim;
            params.embedding.data[s * d..(s + 1) * d].to_vec()
        })
        .collect();
    let text = gru_forward(&params.text_gru, text_inputs);
    let position = gru_forward(
        &params.position_gru,
        input.positions.iter().map(|p| p.to_vec()).collect(),
    );

    let img = &input.image;
    let mut shape = Shape3 {
        c: img.channels,
        h: img.height,
        w: img.width,
    };
    let mut current = img.data.clone();
    let mut conv_inputs = Vec::with_capacity(3);
    let mut conv_outputs = Vec::with_capacity(3);
    for layer in &params.conv {
        let (out, oshape) = conv_forward(layer, &current, shape);
        conv_inputs.push((current, shape));
        conv_outputs.push((out.clone(), oshape));
        current = out;
        shape = oshape;
    }
    let area = (shape.h * shape.w) as f64;
    let pooled: Vec<f64> = (0..shape.c)
        .map(|c| current[c * shape.h * shape.w..(c + 1) * shape.h * shape.w].iter().sum::<f64>() / area)
        .collect();
    let mut image_feature = params.projection_bias.data.clone();
    matvec(&params.projection, &pooled, &mut image_feature);
    image_feature.iter_mut().for_each(|v| *v = v.tanh());

    let mut features = Vec::with_capacity(params.dims.head_input());
    features.extend_from_slice(text.last());
    features.extend_from_slice(position.last());
    features.extend_from_slice(&image_feature);
    let logit = params.head_bias.data[0]
        + params
            .head
            .data
            .iter()
            .zip(&features)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    Trace {
        text,
        position,
        conv_inputs,
        conv_outputs,
        pooled,
        image_feature,
        features,
        logit,
    }
}

/// Probability of an artificial overlay, strictly inside (0, 1) for finite logits.
pub fn forward(params: &FusionParams, input: &FusionInput) -> f64 {
    sigmoid(run(params, input).logit)
}

/// Checks shapes, prepares the input and runs [`forward`].
pub fn predict(params: &FusionParams, tokens: &[OcrToken], image: &Raster) -> Result<f64, FusionError> {
    params.check_shapes()?;
    let input = FusionInput::prepare(params, tokens, image)?;
    Ok(forward(params, &input))
}

/// Binary cross-entropy on a clamped probability.
pub fn bce(probability: f64, label: BinaryLabel) -> f64 {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label.is_positive() {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn target(label: BinaryLabel) -> f64 {
    if label.is_positive() {
        1.0
    } else {
        0.0
    }
}

/// Accumulates `scale * dLoss/dParams` for one example into `grad`.
/// Returns (loss, probability).
fn backprop(params: &FusionParams, input: &FusionInput, label: BinaryLabel, scale: f64, grad: &mut FusionParams) -> (f64, f64) {
    let trace = run(params, input);
    let p = sigmoid(trace.logit);
    let loss = bce(p, label);
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let d_logit = if clamped { 0.0 } else { scale * (p - target(label)) };
    if d_logit == 0.0 {
        return (loss, p);
    }

    grad.head_bias.data[0] += d_logit;
    for (g, f) in grad.head.data.iter_mut().zip(&trace.features) {
        *g += d_logit * f;
    }
    let d_features: Vec<f64> = params.head.data.iter().map(|w| w * d_logit).collect();
    let dims = &params.dims;
    let (d_text, rest) = d_features.split_at(dims.text_hidden);
    let (d_pos, d_img) = rest.split_at(dims.position_hidden);

    let d_emb_steps = gru_backward(&params.text_gru, &trace.text, d_text, &mut grad.text_gru);
    let e = dims.embed_dim;
    for (&sym, dx) in input.symbols.iter().zip(&d_emb_steps) {
        add_into(&mut grad.embedding.data[sym * e..(sym + 1) * e], dx);
    }
    gru_backward(&params.position_gru, &trace.position, d_pos, &mut grad.position_gru);

    let d_proj_pre: Vec<f64> = d_img
        .iter()
        .zip(&trace.image_feature)
        .map(|(d, a)| d * (1.0 - a * a))
        .collect();
    outer_acc(&mut grad.projection, &d_proj_pre, &trace.pooled);
    add_into(&mut grad.projection_bias.data, &d_proj_pre);
    let mut d_pooled = vec![0.0; trace.pooled.len()];
    matvec_t(&params.projection, &d_proj_pre, &mut d_pooled);

    let (_, last_shape) = trace.conv_outputs[2];
    let area = last_shape.h * last_shape.w;
    let mut d_act: Vec<f64> = (0..last_shape.c)
        .flat_map(|c| std::iter::repeat(d_pooled[c] / area as f64).take(area))
        .collect();
    for layer in (0..3).rev() {
        let (out, oshape) = &trace.conv_outputs[layer];
        let (inp, ishape) = &trace.conv_inputs[layer];
        let d_pre: Vec<f64> = d_act.iter().zip(out).map(|(d, a)| d * (1.0 - a * a)).collect();
        match conv_backward(&params.conv[layer], inp, *ishape, &d_pre, *oshape, &mut grad.conv[layer], layer > 0) {
            Some(d_in) => d_act = d_in,
            None => break,
        }
    }
    (loss, p)
}

/// Loss and gradient over prepared inputs; both are batch means.
pub fn loss_and_grad_prepared(
    params: &FusionParams,
    batch: &[(&FusionInput, BinaryLabel)],
) -> Result<(f64, FusionParams), FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let mut grad = FusionParams::zeros(&params.dims);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (input, label) in batch {
        loss += backprop(params, input, *label, scale, &mut grad).0;
    }
    Ok((loss * scale, grad))
}

/// Mean binary cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(
    params: &FusionParams,
    batch: &[TrainRecord],
) -> Result<(f64, FusionParams), FusionError> {
    params.check_shapes()?;
    let inputs = batch
        .iter()
        .map(|r| FusionInput::prepare(params, &r.tokens, &r.image))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<_> = inputs.iter().zip(batch).map(|(i, r)| (i, r.label)).collect();
    loss_and_grad_prepared(params, &pairs)
}

/// Loss only; used by finite-difference checks.
pub fn batch_loss(params: &FusionParams, batch: &[TrainRecord]) -> Result<f64, FusionError> {
    params.check_shapes()?;
    if batch.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    let mut total = 0.0;
    for r in batch {
        let input = FusionInput::prepare(params, &r.tokens, &r.image)?;
        total += bce(forward(params, &input), r.label);
    }
    Ok(total / batch.len() as f64)
}

/// Runs one step of SGD bookkeeping: accumulates the gradient of a single
/// example into `grad` scaled by `scale` and returns (loss, probability).
pub(crate) fn accumulate(
    params: &FusionParams,
    input: &FusionInput,
    label: BinaryLabel,
    scale: f64,
    grad: &mut FusionParams,
) -> (f64, f64) {
    backprop(params, input, label, scale, grad)
}
