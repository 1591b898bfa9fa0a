use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::DatasetView;
use crate::model::{SttmConfig, SttmParams, SENSITIVE_NAMES};
use crate::numerics::{Graph, Tensor, ValueId};

/// Dropout is live only in training mode; inference is deterministic.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Infer,
}

/// A built forward graph over one batch: predictions plus the parameter leaf
/// ids (in canonical parameter order) for gradient extraction.
pub struct BatchForward {
    pub graph: Graph,
    /// `[batch, 1]` predicted minutes.
    pub predictions: ValueId,
    pub param_leaves: Vec<ValueId>,
    trace: TraceIds,
}

#[derive(Default, Clone, Copy)]
struct TraceIds {
    x_a_projected: Option<ValueId>,
    o_temporal: Option<ValueId>,
    o_spatial: Option<ValueId>,
    x_b_embedded: Option<ValueId>,
    query: Option<ValueId>,
    pattern_weights: Option<ValueId>,
    attention_read: Option<ValueId>,
}

/// Intermediate activations of a single-sample forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Projected window features plus slice-position embedding, `[m, n, h]`.
    pub x_a_projected: Tensor,
    /// Per-district temporal summaries, `[m, h]`.
    pub o_temporal: Tensor,
    /// Spatio-temporal summary, `[h]`.
    pub o_spatial: Tensor,
    /// Mapped sensitive embedding, `[memory_hidden]`.
    pub x_b_embedded: Tensor,
    /// Memory query, `[memory_dim]`; absent without the memory network.
    pub query: Option<Tensor>,
    /// Attention over stored patterns, `[memory_patterns]`; non-negative,
    /// sums to one.
    pub pattern_weights: Option<Tensor>,
    /// Attention-weighted pattern read, `[memory_dim]`.
    pub attention_read: Option<Tensor>,
    pub prediction: f64,
}

fn apply_dropout(g: &mut Graph, x: ValueId, rate: f64, mode: &mut Mode) -> Result<ValueId> {
    match mode {
        Mode::Train(rng) => g.dropout(x, rate, true, *rng),
        Mode::Infer => Ok(x),
    }
}

/// One post-norm encoder layer: multi-head self-attention and a two-layer
/// feed-forward block, each with residual connection, dropout on the sublayer
/// output, and layer normalization.
fn encoder_layer(
    g: &mut Graph,
    by_name: &HashMap<String, ValueId>,
    prefix: &str,
    layer: usize,
    x: ValueId,
    blocks: usize,
    cfg: &SttmConfig,
    mode: &mut Mode,
) -> Result<ValueId> {
    let p = |n: &str| by_name[&format!("{prefix}.{layer}.{n}")];
    let q0 = g.matmul(x, p("w_q"))?;
    let q = g.add_bias(q0, p("b_q"))?;
    let k0 = g.matmul(x, p("w_k"))?;
    let k = g.add_bias(k0, p("b_k"))?;
    let v0 = g.matmul(x, p("w_v"))?;
    let v = g.add_bias(v0, p("b_v"))?;
    let attn = g.block_attention(q, k, v, blocks, cfg.heads)?;
    let o0 = g.matmul(attn, p("w_o"))?;
    let o = g.add_bias(o0, p("b_o"))?;
    let o = apply_dropout(g, o, cfg.dropout, mode)?;
    let sum1 = g.add(x, o)?;
    let x1 = g.layer_norm(sum1, p("ln1_gain"), p("ln1_bias"))?;
    let f0 = g.matmul(x1, p("w_ff1"))?;
    let f1 = g.add_bias(f0, p("b_ff1"))?;
    let f2 = g.relu(f1);
    let f3 = g.matmul(f2, p("w_ff2"))?;
    let f4 = g.add_bias(f3, p("b_ff2"))?;
    let f5 = apply_dropout(g, f4, cfg.dropout, mode)?;
    let sum2 = g.add(x1, f5)?;
    g.layer_norm(sum2, p("ln2_gain"), p("ln2_bias"))
}

/// Builds the full forward graph over `indices` of the dataset view.
///
/// Per sample: window features are projected and given slice-position
/// embeddings, each district's slice sequence runs through the temporal
/// encoder and is summarized at the most recent slice, summaries across
/// districts receive relative-coordinate embeddings and run through the
/// spatial encoder, the center district's token is read out, the memory is
/// queried from that summary plus the sensitive embedding, and the MLP maps
/// the concatenated summary, query and attention read to minutes.
pub fn forward_batch(
    params: &SttmParams,
    view: &DatasetView,
    indices: &[usize],
    mut mode: Mode,
) -> Result<BatchForward> {
    let cfg = &params.config;
    if indices.is_empty() {
        return Err(Error::Contract("forward_batch: empty batch".into()));
    }
    if view.m != cfg.m || view.n != cfg.n {
        return Err(Error::dimension(
            "forward_batch view",
            &[view.m, view.n],
            &[cfg.m, cfg.n],
        ));
    }
    if view.dataset.header.d_a != cfg.d_a {
        return Err(Error::dimension(
            "forward_batch features",
            &[view.dataset.header.d_a],
            &[cfg.d_a],
        ));
    }
    let b = indices.len();
    let bm = b * cfg.m;

    let mut g = Graph::new();
    let mut param_leaves = Vec::with_capacity(params.names().len());
    let mut by_name = HashMap::new();
    for (name, p) in params.iter() {
        let id = g.leaf(p.tensor.clone(), true);
        param_leaves.push(id);
        by_name.insert(name.to_string(), id);
    }
    let p = |n: &str| by_name[n];
    let mut trace = TraceIds::default();

    // spatio-temporal input [b*m*n, d_a]
    let block = cfg.m * cfg.n * cfg.d_a;
    let mut xa = vec![0.0; b * block];
    for (i, &idx) in indices.iter().enumerate() {
        view.fill_x_a(idx, &mut xa[i * block..(i + 1) * block]);
    }
    let x = g.constant(Tensor::new(vec![bm * cfg.n, cfg.d_a], xa)?);

    let mut h = g.matmul(x, p("w_xa"))?;
    if cfg.use_tpe {
        let tpe = g.tile_rows(p("tpe"), bm)?;
        h = g.add(h, tpe)?;
    }
    trace.x_a_projected = Some(h);

    // temporal summary: output at the most recent slice of each district
    let last_slice: Vec<u32> = (0..bm).map(|i| (i * cfg.n + cfg.n - 1) as u32).collect();
    let o_temporal = if cfg.use_temporal_transformer {
        let mut enc = h;
        for l in 0..cfg.layers {
            enc = encoder_layer(&mut g, &by_name, "temporal", l, enc, bm, cfg, &mut mode)?;
        }
        g.lookup_rows(enc, &last_slice, "temporal summary")?
    } else {
        g.lookup_rows(h, &last_slice, "temporal summary")?
    };
    trace.o_temporal = Some(o_temporal);

    // spatial summary: center-district token, or the district mean when the
    // spatial encoder is ablated
    let o_spatial = if cfg.use_spatial_transformer {
        let mut s = o_temporal;
        if cfg.spe_active() {
            let mut xs = Vec::with_capacity(bm);
            let mut ys = Vec::with_capacity(bm);
            for &idx in indices {
                for &(cx, cy) in &view.coords(idx)?[..cfg.m] {
                    xs.push(cx);
                    ys.push(cy);
                }
            }
            let ex = g.lookup_rows(p("spe_x"), &xs, "relative x coordinate")?;
            let ey = g.lookup_rows(p("spe_y"), &ys, "relative y coordinate")?;
            let e = g.add(ex, ey)?;
            s = g.add(s, e)?;
        }
        for l in 0..cfg.layers {
            s = encoder_layer(&mut g, &by_name, "spatial", l, s, b, cfg, &mut mode)?;
        }
        let centers: Vec<u32> = (0..b).map(|i| (i * cfg.m) as u32).collect();
        g.lookup_rows(s, &centers, "spatial summary")?
    } else {
        g.mean_rows(o_temporal, b)?
    };
    trace.o_spatial = Some(o_spatial);

    // sensitive features through per-feature embeddings
    let mut embedded = Vec::with_capacity(SENSITIVE_NAMES.len());
    for (fi, name) in SENSITIVE_NAMES.iter().enumerate() {
        let ids: Vec<u32> = indices.iter().map(|&i| view.sample(i).x_b[fi]).collect();
        embedded.push(g.lookup_rows(p(&format!("embed.{name}")), &ids, name)?);
    }
    let cat = g.concat_cols(&embedded)?;
    let xb = g.matmul(cat, p("w_xb"))?;
    trace.x_b_embedded = Some(xb);

    let mlp_in = if cfg.use_memory {
        let qin = g.concat_cols(&[o_spatial, xb])?;
        let q0 = g.matmul(qin, p("memory.w_query"))?;
        let q = g.add_bias(q0, p("memory.b_query"))?;
        let logits = g.matmul_nt(q, p("memory.w_mem"))?;
        let weights = g.softmax(logits, 1)?;
        let alpha = g.matmul(weights, p("memory.w_mem"))?;
        trace.query = Some(q);
        trace.pattern_weights = Some(weights);
        trace.attention_read = Some(alpha);
        g.concat_cols(&[o_spatial, q, alpha])?
    } else {
        g.concat_cols(&[o_spatial, xb])?
    };

    let h0 = g.matmul(mlp_in, p("mlp.w1"))?;
    let h1 = g.add_bias(h0, p("mlp.b1"))?;
    let h2 = g.relu(h1);
    let h3 = apply_dropout(&mut g, h2, cfg.dropout, &mut mode)?;
    let y0 = g.matmul(h3, p("mlp.w2"))?;
    let predictions = g.add_bias(y0, p("mlp.b2"))?;

    Ok(BatchForward {
        graph: g,
        predictions,
        param_leaves,
        trace,
    })
}

impl BatchForward {
    pub fn prediction_values(&self) -> &[f64] {
        self.graph.data(self.predictions)
    }

    /// Moves this batch's parameter gradients into `params` (replacing any
    /// stale gradients); call after `backward`.
    pub fn extract_grads(mut self, params: &mut SttmParams) -> Result<()> {
        let leaves = std::mem::take(&mut self.param_leaves);
        for (leaf, p) in leaves.into_iter().zip(params.params_mut()) {
            p.grad = Some(self.graph.take_grad(leaf).ok_or_else(|| {
                Error::Contract("extract_grads called before backward".into())
            })?);
        }
        Ok(())
    }
}

/// Inference-mode prediction for one sample, in minutes. Deterministic:
/// repeated calls agree bit-exactly.
pub fn predict(params: &SttmParams, view: &DatasetView, index: usize) -> Result<f64> {
    let fwd = forward_batch(params, view, &[index], Mode::Infer)?;
    let y = fwd.prediction_values()[0];
    if !y.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite prediction for sample {index}"
        )));
    }
    Ok(y)
}

/// Single-sample forward pass that keeps intermediate activations.
pub fn forward_trace(params: &SttmParams, view: &DatasetView, index: usize) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let fwd = forward_batch(params, view, &[index], Mode::Infer)?;
    let g = &fwd.graph;
    let tensor_of = |id: ValueId, shape: Vec<usize>| -> Tensor {
        Tensor::new(shape, g.data(id).to_vec()).expect("trace shape")
    };
    let t = fwd.trace;
    Ok(ForwardTrace {
        x_a_projected: tensor_of(
            t.x_a_projected.expect("always set"),
            vec![cfg.m, cfg.n, cfg.hidden],
        ),
        o_temporal: tensor_of(t.o_temporal.expect("always set"), vec![cfg.m, cfg.hidden]),
        o_spatial: tensor_of(t.o_spatial.expect("always set"), vec![cfg.hidden]),
        x_b_embedded: tensor_of(t.x_b_embedded.expect("always set"), vec![cfg.memory_hidden]),
        query: t.query.map(|id| tensor_of(id, vec![cfg.memory_dim])),
        pattern_weights: t
            .pattern_weights
            .map(|id| tensor_of(id, vec![cfg.memory_patterns])),
        attention_read: t
            .attention_read
            .map(|id| tensor_of(id, vec![cfg.memory_dim])),
        prediction: fwd.prediction_values()[0],
    })
}
