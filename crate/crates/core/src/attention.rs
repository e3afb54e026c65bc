//! Single-head cross-attention from flattened spectral frames (queries) to
//! text tokens (keys and values), plus the frame self-attention used as the
//! quadratic-cost reference in benchmarks.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{add_outer, dot, matvec, matvec_t, softmax};
use crate::params::{accumulate, Grads, ParamStore};
use crate::text::TextEmbedding;

pub const WQ: &str = "attn.wq";
pub const WK: &str = "attn.wk";
pub const WV: &str = "attn.wv";
pub const WO: &str = "attn.wo";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub d_head: usize,
    pub scale: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, d_head: usize) -> Result<Self> {
        if d_head == 0 || d_model == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        Ok(AttentionConfig {
            d_model,
            d_head,
            scale: 1.0 / (d_head as f64).sqrt(),
        })
    }
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub queries: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// `frames × tokens` softmax weights.
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    pub output: Vec<f64>,
}

struct Weights<'a> {
    wq: &'a [f64],
    wk: &'a [f64],
    wv: &'a [f64],
    wo: &'a [f64],
}

fn weights<'a>(params: &'a ParamStore, cfg: &AttentionConfig, d_text: usize) -> Result<Weights<'a>> {
    Ok(Weights {
        wq: params.value(WQ, &[cfg.d_head, cfg.d_model])?,
        wk: params.value(WK, &[cfg.d_head, d_text])?,
        wv: params.value(WV, &[cfg.d_head, d_text])?,
        wo: params.value(WO, &[cfg.d_model, cfg.d_head])?,
    })
}

pub(crate) fn cross_attention_traced(
    frames: &[f64],
    text: &TextEmbedding,
    params: &ParamStore,
    cfg: &AttentionConfig,
    parallel: bool,
) -> Result<AttentionTrace> {
    if text.len == 0 {
        return Err(Error::invalid("cross-attention needs at least one text token"));
    }
    if frames.len() % cfg.d_model != 0 {
        return Err(Error::invalid(format!(
            "frame buffer of {} values is not a multiple of d_model {}",
            frames.len(),
            cfg.d_model
        )));
    }
    let w = weights(params, cfg, text.dim)?;
    let dh = cfg.d_head;
    let n_tok = text.len;
    let mut keys = Vec::with_capacity(n_tok * dh);
    let mut values = Vec::with_capacity(n_tok * dh);
    for j in 0..n_tok {
        keys.extend(matvec(w.wk, dh, text.token(j)));
        values.extend(matvec(w.wv, dh, text.token(j)));
    }

    let per_frame = |frame: &[f64]| {
        let q = matvec(w.wq, dh, frame);
        let scores: Vec<f64> = keys
            .chunks_exact(dh)
            .map(|k| cfg.scale * dot(&q, k))
            .collect();
        let a = softmax(&scores);
        let mut ctx = vec![0.0; dh];
        for (aj, v) in a.iter().zip(values.chunks_exact(dh)) {
            for (c, vv) in ctx.iter_mut().zip(v) {
                *c += aj * vv;
            }
        }
        let out = matvec(w.wo, cfg.d_model, &ctx);
        (q, a, ctx, out)
    };
    let rows: Vec<_> = if parallel {
        frames.par_chunks_exact(cfg.d_model).map(per_frame).collect()
    } else {
        frames.chunks_exact(cfg.d_model).map(per_frame).collect()
    };

    let n_frames = rows.len();
    let mut trace = AttentionTrace {
        queries: Vec::with_capacity(n_frames * dh),
        keys,
        values,
        weights: Vec::with_capacity(n_frames * n_tok),
        context: Vec::with_capacity(n_frames * dh),
        output: Vec::with_capacity(n_frames * cfg.d_model),
    };
    for (q, a, ctx, out) in rows {
        trace.queries.extend(q);
        trace.weights.extend(a);
        trace.context.extend(ctx);
        trace.output.extend(out);
    }
    Ok(trace)
}

/// `frames` is `T × d_model`; the result has the same shape.
pub fn cross_attention(
    frames: &[f64],
    text: &TextEmbedding,
    params: &ParamStore,
    cfg: &AttentionConfig,
) -> Result<Vec<f64>> {
    Ok(cross_attention_traced(frames, text, params, cfg, false)?.output)
}

/// Gradients of cross-attention. Returns `(grad_frames, grad_tokens)`;
/// projection gradients go into `grads`.
pub(crate) fn cross_attention_backward(
    frames: &[f64],
    text: &TextEmbedding,
    params: &ParamStore,
    cfg: &AttentionConfig,
    trace: &AttentionTrace,
    grad_out: &[f64],
    grads: &mut Grads,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = weights(params, cfg, text.dim)?;
    let dh = cfg.d_head;
    let dm = cfg.d_model;
    let n_tok = text.len;
    let n_frames = frames.len() / dm;

    let mut g_wq = vec![0.0; dh * dm];
    let mut g_wo = vec![0.0; dm * dh];
    let mut g_keys = vec![0.0; n_tok * dh];
    let mut g_values = vec![0.0; n_tok * dh];
    let mut g_frames = vec![0.0; frames.len()];

    for i in 0..n_frames {
        let go = &grad_out[i * dm..(i + 1) * dm];
        if go.iter().all(|&v| v == 0.0) {
            continue;
        }
        let ctx = &trace.context[i * dh..(i + 1) * dh];
        let q = &trace.queries[i * dh..(i + 1) * dh];
        let a = &trace.weights[i * n_tok..(i + 1) * n_tok];
        add_outer(&mut g_wo, go, ctx);
        let g_ctx = matvec_t(w.wo, dh, go);
        let g_a: Vec<f64> = trace.values.chunks_exact(dh).map(|v| dot(&g_ctx, v)).collect();
        for (j, &aj) in a.iter().enumerate() {
            for (gv, gc) in g_values[j * dh..(j + 1) * dh].iter_mut().zip(&g_ctx) {
                *gv += aj * gc;
            }
        }
        let mean = dot(a, &g_a);
        let mut g_q = vec![0.0; dh];
        for j in 0..n_tok {
            let g_s = a[j] * (g_a[j] - mean) * cfg.scale;
            let k = &trace.keys[j * dh..(j + 1) * dh];
            for d in 0..dh {
                g_q[d] += g_s * k[d];
                g_keys[j * dh + d] += g_s * q[d];
            }
        }
        let frame = &frames[i * dm..(i + 1) * dm];
        add_outer(&mut g_wq, &g_q, frame);
        g_frames[i * dm..(i + 1) * dm].copy_from_slice(&matvec_t(w.wq, dm, &g_q));
    }

    let mut g_wk = vec![0.0; dh * text.dim];
    let mut g_wv = vec![0.0; dh * text.dim];
    let mut g_tokens = vec![0.0; n_tok * text.dim];
    for j in 0..n_tok {
        let tok = text.token(j);
        let gk = &g_keys[j * dh..(j + 1) * dh];
        let gv = &g_values[j * dh..(j + 1) * dh];
        add_outer(&mut g_wk, gk, tok);
        add_outer(&mut g_wv, gv, tok);
        let row = &mut g_tokens[j * text.dim..(j + 1) * text.dim];
        for (r, (a, b)) in row
            .iter_mut()
            .zip(matvec_t(w.wk, text.dim, gk).into_iter().zip(matvec_t(w.wv, text.dim, gv)))
        {
            *r = a + b;
        }
    }
    accumulate(grads, WQ, &g_wq);
    accumulate(grads, WK, &g_wk);
    accumulate(grads, WV, &g_wv);
    accumulate(grads, WO, &g_wo);
    Ok((g_frames, g_tokens))
}

/// Projections for frame self-attention: queries, keys and values all come
/// from the frames (`d_head × d_model` each), output `d_model × d_head`.
#[derive(Debug, Clone)]
pub struct SelfAttentionWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub cfg: AttentionConfig,
}

/// Every frame attends to every frame: O(T²) in the number of frames.
pub fn frame_self_attention(frames: &[f64], w: &SelfAttentionWeights, parallel: bool) -> Vec<f64> {
    let dm = w.cfg.d_model;
    let dh = w.cfg.d_head;
    let project = |m: &[f64]| -> Vec<f64> {
        frames.chunks_exact(dm).flat_map(|f| matvec(m, dh, f)).collect()
    };
    let q = project(&w.wq);
    let k = project(&w.wk);
    let v = project(&w.wv);
    let per_query = |qi: &[f64]| -> Vec<f64> {
        let scores: Vec<f64> = k.chunks_exact(dh).map(|kj| w.cfg.scale * dot(qi, kj)).collect();
        let a = softmax(&scores);
        let mut ctx = vec![0.0; dh];
        for (aj, vj) in a.iter().zip(v.chunks_exact(dh)) {
            for (c, x) in ctx.iter_mut().zip(vj) {
                *c += aj * x;
            }
        }
        matvec(&w.wo, dm, &ctx)
    };
    if parallel {
        q.par_chunks_exact(dh).flat_map_iter(per_query).collect()
    } else {
        q.chunks_exact(dh).flat_map(per_query).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;
    use crate::text::{embed_text, TokenSequence, EMBEDDING_PARAM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DM: usize = 6;
    const DH: usize = 3;
    const DT: usize = 4;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn setup(seed: u64, ids: Vec<usize>, table: Option<Vec<f64>>) -> (ParamStore, TextEmbedding) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert(WQ, Param::new(vec![DH, DM], rand_vec(&mut rng, DH * DM)));
        s.insert(WK, Param::new(vec![DH, DT], rand_vec(&mut rng, DH * DT)));
        s.insert(WV, Param::new(vec![DH, DT], rand_vec(&mut rng, DH * DT)));
        s.insert(WO, Param::new(vec![DM, DH], rand_vec(&mut rng, DM * DH)));
        let table = table.unwrap_or_else(|| rand_vec(&mut rng, 5 * DT));
        s.insert(EMBEDDING_PARAM, Param::new(vec![5, DT], table));
        let e = embed_text(&TokenSequence { ids }, &s).unwrap();
        (s, e)
    }

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(DM, DH).unwrap()
    }

    /// Per-frame brute force written against the definition.
    fn oracle(frames: &[f64], e: &TextEmbedding, s: &ParamStore) -> Vec<f64> {
        let p = |n: &str| s.get(n).unwrap().value.clone();
        let (wq, wk, wv, wo) = (p(WQ), p(WK), p(WV), p(WO));
        let mut out = Vec::new();
        for f in frames.chunks(DM) {
            let q: Vec<f64> = (0..DH).map(|r| (0..DM).map(|c| wq[r * DM + c] * f[c]).sum()).collect();
            let mut scores = Vec::new();
            let mut vals = Vec::new();
            for j in 0..e.len {
                let t = e.token(j);
                let k: Vec<f64> = (0..DH).map(|r| (0..DT).map(|c| wk[r * DT + c] * t[c]).sum()).collect();
                let v: Vec<f64> = (0..DH).map(|r| (0..DT).map(|c| wv[r * DT + c] * t[c]).sum()).collect();
                scores.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (DH as f64).sqrt());
                vals.push(v);
            }
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut ctx = [0.0; DH];
            for (sj, v) in scores.iter().zip(&vals) {
                for d in 0..DH {
                    ctx[d] += sj.exp() / z * v[d];
                }
            }
            for r in 0..DM {
                out.push((0..DH).map(|c| wo[r * DH + c] * ctx[c]).sum());
            }
        }
        out
    }

    #[test]
    fn single_token_output_is_wo_wv_token() {
        let (s, e) = setup(1, vec![2], None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = rand_vec(&mut rng, 4 * DM);
        let out = cross_attention(&frames, &e, &s, &cfg()).unwrap();
        let v = matvec(&s.get(WV).unwrap().value, DH, e.token(0));
        let expect = matvec(&s.get(WO).unwrap().value, DM, &v);
        for row in out.chunks(DM) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_tokens_match_single_token() {
        let (s1, e1) = setup(3, vec![1], None);
        let (_, e3) = setup(3, vec![1, 1, 1], None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = rand_vec(&mut rng, 3 * DM);
        let a = cross_attention(&frames, &e1, &s1, &cfg()).unwrap();
        let b = cross_attention(&frames, &e3, &s1, &cfg()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn two_tokens_match_brute_force() {
        let (s, e) = setup(5, vec![0, 3], None);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = rand_vec(&mut rng, 5 * DM);
        let out = cross_attention(&frames, &e, &s, &cfg()).unwrap();
        for (a, b) in out.iter().zip(oracle(&frames, &e, &s)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let (s, e) = setup(7, vec![0, 3, 4, 1], None);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = rand_vec(&mut rng, 6 * DM);
        let t = cross_attention_traced(&frames, &e, &s, &cfg(), false).unwrap();
        for row in t.weights.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let tp = cross_attention_traced(&frames, &e, &s, &cfg(), true).unwrap();
        assert_eq!(t.output, tp.output);
    }

    #[test]
    fn empty_text_rejected() {
        let (s, mut e) = setup(1, vec![2], None);
        e.len = 0;
        e.tokens.clear();
        assert!(matches!(
            cross_attention(&[0.0; DM], &e, &s, &cfg()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (s, e) = setup(9, vec![0, 3, 2], None);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = rand_vec(&mut rng, 4 * DM);
        let probe = rand_vec(&mut rng, 4 * DM);
        let loss = |frames: &[f64], s: &ParamStore, e: &TextEmbedding| -> f64 {
            dot(&cross_attention(frames, e, s, &cfg()).unwrap(), &probe)
        };
        let t = cross_attention_traced(&frames, &e, &s, &cfg(), false).unwrap();
        let mut grads = Grads::new();
        let (gf, gt) = cross_attention_backward(&frames, &e, &s, &cfg(), &t, &probe, &mut grads).unwrap();
        let eps = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-7 * a.abs().max(n.abs()).max(1e-3);
        for i in 0..frames.len() {
            let mut p = frames.clone();
            p[i] += eps;
            let mut m = frames.clone();
            m[i] -= eps;
            let num = (loss(&p, &s, &e) - loss(&m, &s, &e)) / (2.0 * eps);
            assert!(close(gf[i], num), "frame {i}: {} vs {num}", gf[i]);
        }
        for i in 0..e.tokens.len() {
            let mut p = e.clone();
            p.tokens[i] += eps;
            let mut m = e.clone();
            m.tokens[i] -= eps;
            let num = (loss(&frames, &s, &p) - loss(&frames, &s, &m)) / (2.0 * eps);
            assert!(close(gt[i], num), "token {i}");
        }
        for name in [WQ, WK, WV, WO] {
            let n = s.get(name).unwrap().len();
            for i in 0..n {
                let mut p = s.clone();
                p.get_mut(name).unwrap().value[i] += eps;
                let mut m = s.clone();
                m.get_mut(name).unwrap().value[i] -= eps;
                let num = (loss(&frames, &p, &e) - loss(&frames, &m, &e)) / (2.0 * eps);
                assert!(close(grads[name][i], num), "{name}[{i}]");
            }
        }
    }

    #[test]
    fn self_attention_parallel_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = SelfAttentionWeights {
            wq: rand_vec(&mut rng, DH * DM),
            wk: rand_vec(&mut rng, DH * DM),
            wv: rand_vec(&mut rng, DH * DM),
            wo: rand_vec(&mut rng, DM * DH),
            cfg: cfg(),
        };
        let frames = rand_vec(&mut rng, 10 * DM);
        let a = frame_self_attention(&frames, &w, false);
        let b = frame_self_attention(&frames, &w, true);
        assert_eq!(a.len(), 10 * DM);
        assert_eq!(a, b);
    }
}
