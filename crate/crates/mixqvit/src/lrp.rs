//! Layer-wise relevance propagation through the toy transformer, the
//! gradient ⊙ relevance site maps built from it, and the per-layer
//! contribution / importance aggregation.
//!
//! Rules: linear mixing nodes use the positive-subset rule (only positive
//! products x_k · w_kj redistribute; outputs with an empty positive subset
//! drop their relevance). Activation-activation matmuls split relevance half
//! and half across the two operands with the same rule. Residual additions
//! split proportionally to |branch value|. LayerNorm, GELU, scaling, and
//! fake-quantization are relevance-transparent. Softmax uses the generic
//! first-order rule R_in = x (R - A Σ R) per row.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;
use crate::vit::{forward_image, layer_registry, ForwardOptions, LayerId, SiteVars, ToyViT, Trace};

/// One positive-subset redistribution step: total relevance credited to
/// inputs vs the relevance sitting on outputs with a nonempty subset.
#[derive(Clone, Copy, Debug)]
pub struct ConservationAudit {
    pub redistributed: f64,
    pub surviving: f64,
}

/// Per-node relevance tensors aligned with a forward tape.
pub struct RelevanceState {
    r: Vec<Option<Tensor>>,
    pub audits: Vec<ConservationAudit>,
}

impl RelevanceState {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.r.get(v.0).and_then(|t| t.as_ref())
    }

    /// Relevance at a node, zeros if nothing reached it.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (d, a) in t.data_mut().iter_mut().zip(add.data()) {
                *d += a;
            }
        }
    }
}

/// Positive-subset redistribution through C = A·B. Each output (n, j) with
/// Σ_k (A_nk B_kj)⁺ > 0 spreads its relevance over those positive products;
/// `wa` and `wb` are the operand credit weights (wa + wb = 1 for a
/// conservative step).
fn zplus_matmul(
    a: &Tensor,
    b: &Tensor,
    r: &Tensor,
    wa: f64,
    wb: f64,
) -> (Option<Tensor>, Option<Tensor>, ConservationAudit) {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut ra = (wa > 0.0).then(|| Tensor::zeros(a.shape().to_vec()));
    let mut rb = (wb > 0.0).then(|| Tensor::zeros(b.shape().to_vec()));
    let mut surviving = 0.0;
    let mut redistributed = 0.0;
    let mut pos = vec![0.0; k];
    for i in 0..n {
        for j in 0..m {
            let mut denom = 0.0;
            for (kk, p) in pos.iter_mut().enumerate() {
                let z = a.at(i, kk) * b.at(kk, j);
                *p = if z > 0.0 { z } else { 0.0 };
                denom += *p;
            }
            if denom <= 0.0 {
                continue; // empty positive subset: relevance dropped
            }
            let rj = r.at(i, j);
            surviving += rj;
            for (kk, p) in pos.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                let share = rj * p / denom;
                if let Some(ra) = ra.as_mut() {
                    ra.set(i, kk, ra.at(i, kk) + wa * share);
                    redistributed += wa * share;
                }
                if let Some(rb) = rb.as_mut() {
                    rb.set(kk, j, rb.at(kk, j) + wb * share);
                    redistributed += wb * share;
                }
            }
        }
    }
    (
        ra,
        rb,
        ConservationAudit {
            redistributed,
            surviving,
        },
    )
}

/// Walk a tape backward from `out`, seeded with `seed`, applying the
/// relevance rules. Works on any graph, not just a full model trace.
pub fn propagate(g: &Graph, out: Var, seed: Tensor) -> Result<RelevanceState> {
    if seed.shape() != g.value(out).shape() {
        return Err(Error::ShapeMismatch {
            context: "relevance seed",
            lhs: seed.shape().to_vec(),
            rhs: g.value(out).shape().to_vec(),
        });
    }
    let mut r: Vec<Option<Tensor>> = vec![None; g.len()];
    let mut audits = Vec::new();
    r[out.0] = Some(seed);
    for idx in (0..=out.0).rev() {
        let rel = match r[idx].take() {
            Some(t) => t,
            None => continue,
        };
        match g.op(idx) {
            Op::Leaf => {
                r[idx] = Some(rel); // keep: inputs/parameters are endpoints
                continue;
            }
            Op::MatMul(a, b) => {
                let (wa, wb) = if g.is_param_leaf(*b) {
                    (1.0, 0.0)
                } else if g.is_param_leaf(*a) {
                    (0.0, 1.0)
                } else {
                    (0.5, 0.5)
                };
                let (ra, rb, audit) = zplus_matmul(g.value(*a), g.value(*b), &rel, wa, wb);
                if let Some(ra) = ra {
                    accumulate(&mut r[a.0], ra);
                }
                if let Some(rb) = rb {
                    accumulate(&mut r[b.0], rb);
                }
                audits.push(audit);
            }
            Op::Add(a, b) => {
                if g.is_param_leaf(*b) {
                    accumulate(&mut r[a.0], rel.clone());
                } else if g.is_param_leaf(*a) {
                    accumulate(&mut r[b.0], rel.clone());
                } else {
                    let av = g.value(*a);
                    let bv = g.value(*b);
                    let mut ra = Tensor::zeros(av.shape().to_vec());
                    let mut rb = Tensor::zeros(bv.shape().to_vec());
                    for i in 0..rel.len() {
                        let (x, y) = (av.data()[i].abs(), bv.data()[i].abs());
                        let fa = if x + y > 0.0 { x / (x + y) } else { 0.5 };
                        ra.data_mut()[i] = rel.data()[i] * fa;
                        rb.data_mut()[i] = rel.data()[i] * (1.0 - fa);
                    }
                    accumulate(&mut r[a.0], ra);
                    accumulate(&mut r[b.0], rb);
                }
            }
            Op::AddRow(x, _bias) => accumulate(&mut r[x.0], rel.clone()),
            Op::MulElem(a, b) => {
                // generic split: half to each factor
                accumulate(&mut r[a.0], rel.scale(0.5));
                accumulate(&mut r[b.0], rel.scale(0.5));
            }
            Op::Scale(x, _) | Op::AddConst(x) | Op::Gelu(x) | Op::FakeQuant(x) => {
                accumulate(&mut r[x.0], rel.clone());
            }
            Op::LayerNorm { x, .. } => accumulate(&mut r[x.0], rel.clone()),
            Op::SoftmaxRows(x) => {
                let xv = g.value(*x);
                let av = g.value(Var(idx));
                let mut rx = Tensor::zeros(xv.shape().to_vec());
                let cols = xv.cols();
                for row in 0..xv.rows() {
                    let total: f64 = (0..cols).map(|c| rel.at(row, c)).sum();
                    for c in 0..cols {
                        rx.set(row, c, xv.at(row, c) * (rel.at(row, c) - av.at(row, c) * total));
                    }
                }
                accumulate(&mut r[x.0], rx);
            }
            Op::MeanRows(x) => {
                let xv = g.value(*x);
                let n = xv.rows();
                let mut rx = Tensor::zeros(xv.shape().to_vec());
                for row in 0..n {
                    for c in 0..xv.cols() {
                        rx.set(row, c, rel.data()[c] / n as f64);
                    }
                }
                accumulate(&mut r[x.0], rx);
            }
            Op::SliceCols { x, start, .. } => {
                let xv = g.value(*x);
                let mut rx = Tensor::zeros(xv.shape().to_vec());
                for row in 0..rel.rows() {
                    for c in 0..rel.cols() {
                        rx.set(row, start + c, rel.at(row, c));
                    }
                }
                accumulate(&mut r[x.0], rx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts.clone() {
                    let pv = g.value(p);
                    let mut rp = Tensor::zeros(pv.shape().to_vec());
                    for row in 0..pv.rows() {
                        for c in 0..pv.cols() {
                            rp.set(row, c, rel.at(row, off + c));
                        }
                    }
                    off += pv.cols();
                    accumulate(&mut r[p.0], rp);
                }
            }
            Op::Transpose(x) => accumulate(&mut r[x.0], rel.transpose()?),
            Op::Sum(x) => {
                // uniform spread (unused on the classification path)
                let xv = g.value(*x);
                let each = rel.data()[0] / xv.len() as f64;
                accumulate(&mut r[x.0], Tensor::filled(xv.shape().to_vec(), each));
            }
            Op::CrossEntropy { logits, .. } => accumulate(&mut r[logits.0], {
                let lv = g.value(*logits);
                Tensor::filled(lv.shape().to_vec(), rel.data()[0] / lv.len() as f64)
            }),
        }
        r[idx] = Some(rel);
    }
    Ok(RelevanceState { r, audits })
}

/// Seed a one-hot at the class logit and propagate to the inputs.
pub fn propagate_relevance(trace: &Trace, class: usize) -> Result<RelevanceState> {
    let logits = trace.logits_tensor();
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let mut seed = Tensor::zeros(logits.shape().to_vec());
    seed.data_mut()[class] = 1.0;
    propagate(&trace.graph, trace.logits, seed)
}

/// S = (grad ⊙ relevance)⁺, elementwise.
pub fn relevance_map(grad: &Tensor, relevance: &Tensor) -> Result<Tensor> {
    if grad.shape() != relevance.shape() {
        return Err(Error::ShapeMismatch {
            context: "relevance map",
            lhs: grad.shape().to_vec(),
            rhs: relevance.shape().to_vec(),
        });
    }
    let mut out = grad.hadamard(relevance)?;
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Site map: positive part first, then the mean over the head axis where one
/// exists; single-tensor sites are the plain positive part.
pub fn site_relevance_map(
    trace: &Trace,
    grads: &crate::graph::Gradients,
    state: &RelevanceState,
    id: LayerId,
) -> Result<Tensor> {
    let map_of = |v: Var| -> Result<Tensor> {
        let g = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(trace.graph.value(v).shape().to_vec()));
        let r = state.get_or_zeros(&trace.graph, v);
        relevance_map(&g, &r)
    };
    match trace.site_vars(id) {
        SiteVars::One(v) => map_of(v),
        SiteVars::Heads(vars) => {
            let mut acc = map_of(vars[0])?;
            for &v in &vars[1..] {
                let m = map_of(v)?;
                for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
                    *a += b;
                }
            }
            let h = vars.len() as f64;
            for a in acc.data_mut() {
                *a /= h;
            }
            Ok(acc)
        }
    }
}

/// C_site = (1/T) Σ_t mean(S_site,t), classes seeded from the model's own
/// argmax prediction per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionTable {
    pub scores: BTreeMap<LayerId, f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub omega: BTreeMap<LayerId, f64>,
}

fn sample_contributions(model: &ToyViT, image: &Tensor) -> Result<Vec<(LayerId, f64)>> {
    let mut trace = forward_image(model, image, ForwardOptions::default())?;
    let class = trace.predicted_class();
    let mut seed = Tensor::zeros(trace.logits_tensor().shape().to_vec());
    seed.data_mut()[class] = 1.0;
    let grads = trace.graph.backward(trace.logits, &seed)?;
    let state = propagate_relevance(&trace, class)?;
    // in-block sites only: the classifier's map is the one-hot-seeded logits,
    // so its mean is ~3 orders of magnitude above every interior site and
    // would soak up the whole normalization
    layer_registry(&model.config)
        .iter()
        .filter(|e| !e.id.kind.outside_blocks())
        .map(|e| {
            let s = site_relevance_map(&trace, &grads, &state, e.id)?;
            Ok((e.id, s.mean()))
        })
        .collect()
}

/// Per-sample work runs in parallel; accumulation is in sample order so the
/// result is bitwise reproducible.
pub fn contribution_scores(model: &ToyViT, samples: &[Tensor]) -> Result<ContributionTable> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("contribution scores need T >= 1".into()));
    }
    let per_sample: Vec<Result<Vec<(LayerId, f64)>>> = samples
        .par_iter()
        .map(|img| sample_contributions(model, img))
        .collect();
    let mut scores: BTreeMap<LayerId, f64> = BTreeMap::new();
    for res in per_sample {
        for (id, c) in res? {
            *scores.entry(id).or_insert(0.0) += c;
        }
    }
    let t = samples.len() as f64;
    for v in scores.values_mut() {
        *v /= t;
    }
    Ok(ContributionTable {
        scores,
        samples: samples.len(),
    })
}

/// Ω_site = C_site / Σ C.
pub fn importance_scores(table: &ContributionTable) -> Result<ImportanceTable> {
    let total: f64 = table.scores.values().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "all contribution scores are zero; cannot normalize".into(),
        ));
    }
    Ok(ImportanceTable {
        omega: table
            .scores
            .iter()
            .map(|(&id, &c)| (id, c / total))
            .collect(),
    })
}

/// Spearman rank correlation; average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let x = ra[i] - ma;
        let y = rb[i] - mb;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite scores"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
