//! Exact mixed-precision bit allocation.
//!
//! Maximize Φ = Σ_layers (Ω_l · b_l − Λ_{kind,b_l} · b_l) subject to
//! Σ |w|·b ≤ C_M (model size in weight-bits) and Σ MAC·b² ≤ C_BitOps.
//! One bit decision per layer, shared by weights and activations.
//!
//! `solve_exact` is branch-and-bound; `brute_force` is the correctness
//! oracle. Both apply the same deterministic tie-break: lexicographically
//! smallest bit vector in layer-registry order among optima, obtained by
//! searching bits in ascending order and accepting only strict improvements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{LayerId, LayerKind};

/// How the sensitivity table enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaOrientation {
    /// Subtract Λ·b: sensitivity penalizes high bit-widths.
    #[default]
    PenalizeHighBits,
    /// Add Λ·b: sensitive layers are pushed away from low precision. The
    /// objective is then monotone in b, so the solver saturates the budget.
    PenalizeLowBits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: LayerId,
    pub weight_count: u64,
    pub macs: u64,
    pub omega: f64,
    /// A pinned layer is excluded from the decision variables; its cost is
    /// pre-subtracted from the budgets.
    pub pinned: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationInstance {
    pub layers: Vec<LayerSpec>,
    /// Sorted candidate bit-widths.
    pub candidates: Vec<u8>,
    /// Λ per (layer kind, bit); missing pairs read as 0.
    pub lambda: BTreeMap<(LayerKind, u8), f64>,
    pub orientation: LambdaOrientation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Model-size bound in weight-bits.
    pub size: u64,
    /// Bound on Σ MAC·b².
    pub bitops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitAssignment {
    /// Chosen bit per layer, in instance order (pinned layers included).
    pub bits: Vec<u8>,
    pub objective: f64,
    pub size: u64,
    pub bitops: u64,
}

impl AllocationInstance {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("allocation instance has no layers".into()));
        }
        if self.candidates.is_empty() || !self.candidates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "candidate bits must be non-empty and strictly increasing".into(),
            ));
        }
        if self.layers.iter().any(|l| l.omega < 0.0) || self.lambda.values().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("scores must be non-negative".into()));
        }
        Ok(())
    }

    fn lambda_at(&self, kind: LayerKind, bit: u8) -> f64 {
        self.lambda.get(&(kind, bit)).copied().unwrap_or(0.0)
    }

    /// Per-layer objective contribution at a bit choice.
    fn score(&self, layer: &LayerSpec, bit: u8) -> f64 {
        let l = self.lambda_at(layer.id.kind, bit);
        let b = bit as f64;
        match self.orientation {
            LambdaOrientation::PenalizeHighBits => layer.omega * b - l * b,
            LambdaOrientation::PenalizeLowBits => layer.omega * b + l * b,
        }
    }
}

/// The budget a fixed-bit reference model would consume.
pub fn budget_from_fixed(instance: &AllocationInstance, b_fixed: u8) -> Result<Budget> {
    instance.validate()?;
    if !instance.candidates.contains(&b_fixed) {
        return Err(Error::InvalidArgument(format!(
            "reference bits {b_fixed} not in candidate set {:?}",
            instance.candidates
        )));
    }
    let b = b_fixed as u64;
    Ok(Budget {
        size: instance.layers.iter().map(|l| l.weight_count * b).sum(),
        bitops: instance.layers.iter().map(|l| l.macs * b * b).sum(),
    })
}

/// Recompute (Φ, size, bitops) from scratch, in instance order.
pub fn evaluate_assignment(
    instance: &AllocationInstance,
    bits: &[u8],
) -> Result<(f64, u64, u64)> {
    instance.validate()?;
    if bits.len() != instance.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} layers, instance has {}",
            bits.len(),
            instance.layers.len()
        )));
    }
    let mut phi = 0.0;
    let mut size = 0u64;
    let mut bitops = 0u64;
    for (layer, &b) in instance.layers.iter().zip(bits) {
        let legal = instance.candidates.contains(&b) || layer.pinned == Some(b);
        if !legal {
            return Err(Error::InvalidArgument(format!(
                "bit {b} for layer {} outside candidate set",
                layer.id
            )));
        }
        if let Some(p) = layer.pinned {
            if p != b {
                return Err(Error::InvalidArgument(format!(
                    "layer {} is pinned to {p} bits, assignment says {b}",
                    layer.id
                )));
            }
        }
        phi += instance.score(layer, b);
        size += layer.weight_count * b as u64;
        bitops += layer.macs * (b as u64) * (b as u64);
    }
    Ok((phi, size, bitops))
}

fn infeasibility_error(instance: &AllocationInstance, budget: &Budget) -> Error {
    // report whichever constraint the all-minimum assignment already breaks
    let bmin = instance.candidates[0] as u64;
    let mut size = 0u64;
    let mut bitops = 0u64;
    for l in &instance.layers {
        let b = l.pinned.map(|p| p as u64).unwrap_or(bmin);
        size += l.weight_count * b;
        bitops += l.macs * b * b;
    }
    if size > budget.size {
        Error::Infeasible {
            constraint: "model size",
            required: size,
            budget: budget.size,
        }
    } else {
        Error::Infeasible {
            constraint: "bit operations",
            required: bitops,
            budget: budget.bitops,
        }
    }
}

/// Exhaustive enumeration oracle. Errors if the search space exceeds 10^7.
pub fn brute_force(instance: &AllocationInstance, budget: &Budget) -> Result<BitAssignment> {
    instance.validate()?;
    let free: Vec<usize> = (0..instance.layers.len())
        .filter(|&i| instance.layers[i].pinned.is_none())
        .collect();
    let combos = (instance.candidates.len() as f64).powi(free.len() as i32);
    if combos > 1e7 {
        return Err(Error::InvalidArgument(format!(
            "brute force space {combos:.0} exceeds 10^7"
        )));
    }
    // per-layer (profit, size, bitops, bit) rows so the inner loop does no
    // validation or lookups
    let rows: Vec<Vec<(f64, u64, u64, u8)>> = instance
        .layers
        .iter()
        .map(|l| {
            let cands: Vec<u8> = match l.pinned {
                Some(p) => vec![p],
                None => instance.candidates.clone(),
            };
            cands
                .into_iter()
                .map(|b| {
                    (
                        instance.score(l, b),
                        l.weight_count * b as u64,
                        l.macs * (b as u64) * (b as u64),
                        b,
                    )
                })
                .collect()
        })
        .collect();
    let mut bits: Vec<u8> = instance
        .layers
        .iter()
        .map(|l| l.pinned.unwrap_or(instance.candidates[0]))
        .collect();
    let mut best: Option<BitAssignment> = None;
    let mut counters = vec![0usize; free.len()];
    loop {
        for (slot, &layer_idx) in free.iter().enumerate() {
            bits[layer_idx] = instance.candidates[counters[slot]];
        }
        let mut phi = 0.0;
        let mut size = 0u64;
        let mut bitops = 0u64;
        let mut slot = 0;
        for (i, row) in rows.iter().enumerate() {
            let ci = if instance.layers[i].pinned.is_some() {
                0
            } else {
                let c = counters[slot];
                slot += 1;
                c
            };
            let (p, s, o, _) = row[ci];
            phi += p;
            size += s;
            bitops += o;
        }
        if size <= budget.size && bitops <= budget.bitops {
            let better = match &best {
                None => true,
                Some(b) => phi > b.objective,
            };
            if better {
                best = Some(BitAssignment {
                    bits: bits.clone(),
                    objective: phi,
                    size,
                    bitops,
                });
            }
        }
        // odometer increment, last free layer fastest: enumeration is
        // lexicographic over the bit vector, so strict improvement keeps the
        // lexicographically smallest optimum
        let mut pos = free.len();
        loop {
            if pos == 0 {
                return best.ok_or_else(|| infeasibility_error(instance, budget));
            }
            pos -= 1;
            counters[pos] += 1;
            if counters[pos] < instance.candidates.len() {
                break;
            }
            counters[pos] = 0;
        }
        if free.is_empty() {
            return best.ok_or_else(|| infeasibility_error(instance, budget));
        }
    }
}

struct Searcher {
    budget: Budget,
    /// profit/size/bitops per (layer, candidate index); pinned layers have a
    /// single synthetic candidate.
    choices: Vec<Vec<(f64, u64, u64, u8)>>,
    /// suffix-minimum cost of layers i.. at their cheapest candidate
    min_size_suffix: Vec<u64>,
    min_ops_suffix: Vec<u64>,
    /// suffix sum of each layer's maximum profit (budget-blind bound)
    max_profit_suffix: Vec<f64>,
    /// surrogate-relaxation data: both budgets collapse into one constraint
    /// c = size/C_M + bitops/C_BitOps, which every feasible completion
    /// satisfies with capacity cap_size/C_M + cap_ops/C_BitOps
    base_cost_suffix: Vec<f64>,
    base_profit_suffix: Vec<f64>,
    /// convex-frontier increments (layer, Δcost, Δprofit), density-descending
    increments: Vec<(usize, f64, f64)>,
    best: Option<BitAssignment>,
    stack: Vec<u8>,
}

impl Searcher {
    fn new(instance: &AllocationInstance, budget: Budget) -> Self {
        let n = instance.layers.len();
        let mut choices = Vec::with_capacity(n);
        for layer in &instance.layers {
            let cands: Vec<u8> = match layer.pinned {
                Some(p) => vec![p],
                None => instance.candidates.clone(),
            };
            choices.push(
                cands
                    .into_iter()
                    .map(|b| {
                        (
                            instance.score(layer, b),
                            layer.weight_count * b as u64,
                            layer.macs * (b as u64) * (b as u64),
                            b,
                        )
                    })
                    .collect(),
            );
        }
        let mut min_size_suffix = vec![0u64; n + 1];
        let mut min_ops_suffix = vec![0u64; n + 1];
        let mut max_profit_suffix = vec![0.0f64; n + 1];
        for i in (0..n).rev() {
            let row: &Vec<(f64, u64, u64, u8)> = &choices[i];
            min_size_suffix[i] =
                min_size_suffix[i + 1] + row.iter().map(|c| c.1).min().unwrap();
            min_ops_suffix[i] = min_ops_suffix[i + 1] + row.iter().map(|c| c.2).min().unwrap();
            max_profit_suffix[i] = max_profit_suffix[i + 1]
                + row.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        }

        // per-layer convex profit/cost frontiers in the surrogate dimension
        let alpha = 1.0 / budget.size.max(1) as f64;
        let beta = 1.0 / budget.bitops.max(1) as f64;
        let mut base_cost = vec![0.0f64; n];
        let mut base_profit = vec![0.0f64; n];
        let mut increments: Vec<(usize, f64, f64)> = Vec::new();
        for (i, row) in choices.iter().enumerate() {
            let mut pts: Vec<(f64, f64)> = row
                .iter()
                .map(|&(p, s, o, _)| (s as f64 * alpha + o as f64 * beta, p))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
            // dominance, then upper-hull: densities must strictly decrease so
            // the greedy LP bound can walk the increments in one pass
            let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
            for (c, p) in pts {
                if hull.iter().any(|&(hc, hp)| hp >= p && hc <= c) {
                    continue;
                }
                while hull.len() >= 2 {
                    let (c1, p1) = hull[hull.len() - 2];
                    let (c2, p2) = hull[hull.len() - 1];
                    // keep c2 only if it lies above the chord c1 -> c
                    if (p2 - p1) * (c - c1) > (p - p1) * (c2 - c1) {
                        break;
                    }
                    hull.pop();
                }
                hull.push((c, p));
            }
            base_cost[i] = hull[0].0;
            base_profit[i] = hull[0].1;
            for w in hull.windows(2) {
                increments.push((i, w[1].0 - w[0].0, w[1].1 - w[0].1));
            }
        }
        increments.sort_by(|a, b| (b.2 * a.1).total_cmp(&(a.2 * b.1)));
        let mut base_cost_suffix = vec![0.0f64; n + 1];
        let mut base_profit_suffix = vec![0.0f64; n + 1];
        for i in (0..n).rev() {
            base_cost_suffix[i] = base_cost_suffix[i + 1] + base_cost[i];
            base_profit_suffix[i] = base_profit_suffix[i + 1] + base_profit[i];
        }
        Searcher {
            budget,
            choices,
            min_size_suffix,
            min_ops_suffix,
            max_profit_suffix,
            base_cost_suffix,
            base_profit_suffix,
            increments,
            best: None,
            stack: Vec::with_capacity(n),
        }
    }

    /// Upper bound on the profit obtainable from layers i..: the LP optimum
    /// of the multiple-choice knapsack under the surrogate constraint, which
    /// relaxes "size <= cap_size and bitops <= cap_ops" to their
    /// budget-normalized sum. A one-pass greedy over the density-sorted
    /// convex-frontier increments solves that LP exactly.
    fn suffix_bound(&self, i: usize, cap_size: u64, cap_ops: u64) -> f64 {
        let cap = cap_size as f64 / self.budget.size.max(1) as f64
            + cap_ops as f64 / self.budget.bitops.max(1) as f64;
        let mut room = cap - self.base_cost_suffix[i];
        if room < 0.0 {
            return f64::NEG_INFINITY; // even the cheapest completion overflows
        }
        let mut total = self.base_profit_suffix[i];
        for &(layer, dc, dp) in &self.increments {
            if layer < i {
                continue;
            }
            if dc <= room {
                room -= dc;
                total += dp;
            } else {
                total += dp * room / dc;
                break;
            }
        }
        total
    }

    fn dfs(&mut self, i: usize, prefix_phi: f64, used_size: u64, used_ops: u64) {
        if i == self.choices.len() {
            let better = match &self.best {
                None => true,
                Some(b) => prefix_phi > b.objective,
            };
            if better {
                self.best = Some(BitAssignment {
                    bits: self.stack.clone(),
                    objective: prefix_phi,
                    size: used_size,
                    bitops: used_ops,
                });
            }
            return;
        }
        let cap_size = self.budget.size - used_size;
        let cap_ops = self.budget.bitops - used_ops;
        // feasibility: the cheapest completion must fit
        if self.min_size_suffix[i] > cap_size || self.min_ops_suffix[i] > cap_ops {
            return;
        }
        // optimality: cheap budget-blind bound first, the capacity-aware one
        // only if that fails; the 1e-9 slack guards against float noise in
        // the bound, leaving the exact incumbent comparison to the leaves
        if let Some(b) = &self.best {
            let cheap = prefix_phi + self.max_profit_suffix[i];
            if cheap < b.objective - 1e-9 {
                return;
            }
            let bound = prefix_phi + self.suffix_bound(i, cap_size, cap_ops);
            if bound < b.objective - 1e-9 {
                return;
            }
        }
        let row = self.choices[i].clone();
        for (p, s, o, b) in row {
            if used_size + s > self.budget.size || used_ops + o > self.budget.bitops {
                continue;
            }
            self.stack.push(b);
            self.dfs(i + 1, prefix_phi + p, used_size + s, used_ops + o);
            self.stack.pop();
        }
    }
}

/// Global optimum by depth-first branch-and-bound; identical objective and
/// tie-break as [`brute_force`].
pub fn solve_exact(instance: &AllocationInstance, budget: &Budget) -> Result<BitAssignment> {
    instance.validate()?;
    let mut s = Searcher::new(instance, *budget);
    s.dfs(0, 0.0, 0, 0);
    s.best.ok_or_else(|| infeasibility_error(instance, budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layer(name: &str, w: u64, macs: u64, omega: f64) -> LayerSpec {
        LayerSpec {
            id: LayerId::parse(name).unwrap(),
            weight_count: w,
            macs,
            omega,
            pinned: None,
        }
    }

    fn two_layer_instance(lambda: &[((LayerKind, u8), f64)]) -> AllocationInstance {
        AllocationInstance {
            layers: vec![
                layer("b0.qkv", 100, 50, 0.6),
                layer("b0.fc1", 100, 150, 0.4),
            ],
            candidates: vec![2, 3, 4],
            lambda: lambda.iter().cloned().collect(),
            orientation: LambdaOrientation::PenalizeHighBits,
        }
    }

    #[test]
    fn fixed_budget_arithmetic() {
        let inst = two_layer_instance(&[]);
        let b = budget_from_fixed(&inst, 3).unwrap();
        assert_eq!(b.size, 600);
        assert_eq!(b.bitops, 9 * 200);
        // the all-reference assignment is feasible by construction
        let (_, size, ops) = evaluate_assignment(&inst, &[3, 3]).unwrap();
        assert!(size <= b.size && ops <= b.bitops);
    }

    #[test]
    fn importance_only_example() {
        // omega {0.6, 0.4}, lambda 0, fixed-3 budget -> (4, 2), phi 3.2
        let inst = two_layer_instance(&[]);
        let budget = budget_from_fixed(&inst, 3).unwrap();
        let sol = solve_exact(&inst, &budget).unwrap();
        assert_eq!(sol.bits, vec![4, 2]);
        assert!((sol.objective - 3.2).abs() < 1e-12);
        assert_eq!(sol.size, 600);
        assert_eq!(sol.bitops, 50 * 16 + 150 * 4);
        assert_eq!(brute_force(&inst, &budget).unwrap(), sol);
    }

    #[test]
    fn sensitivity_penalty_flips_choice() {
        // lambda_{qkv,4} = 0.5 makes (4, 2) score 1.2; (3, 3) wins at 3.0
        let inst = two_layer_instance(&[((LayerKind::Qkv, 4), 0.5)]);
        let budget = budget_from_fixed(&inst, 3).unwrap();
        let sol = solve_exact(&inst, &budget).unwrap();
        assert_eq!(sol.bits, vec![3, 3]);
        assert!((sol.objective - 3.0).abs() < 1e-12);
        let (phi42, _, _) = evaluate_assignment(&inst, &[4, 2]).unwrap();
        assert!((phi42 - 1.2).abs() < 1e-12);
        assert_eq!(brute_force(&inst, &budget).unwrap(), sol);
    }

    #[test]
    fn generous_budget_takes_max_bits() {
        let inst = two_layer_instance(&[]);
        let budget = Budget {
            size: u64::MAX / 2,
            bitops: u64::MAX / 2,
        };
        let sol = solve_exact(&inst, &budget).unwrap();
        assert_eq!(sol.bits, vec![4, 4]);
    }

    #[test]
    fn omega_scaling_leaves_assignment_unchanged() {
        let mut inst = two_layer_instance(&[]);
        let budget = budget_from_fixed(&inst, 3).unwrap();
        let a = solve_exact(&inst, &budget).unwrap();
        for l in &mut inst.layers {
            l.omega *= 17.5;
        }
        let b = solve_exact(&inst, &budget).unwrap();
        assert_eq!(a.bits, b.bits);
    }

    #[test]
    fn budget_monotonicity() {
        let inst = two_layer_instance(&[]);
        let small = budget_from_fixed(&inst, 2).unwrap();
        let big = budget_from_fixed(&inst, 4).unwrap();
        let a = solve_exact(&inst, &small).unwrap();
        let b = solve_exact(&inst, &big).unwrap();
        assert!(b.objective >= a.objective);
    }

    #[test]
    fn infeasible_budget_reports_constraint() {
        let inst = two_layer_instance(&[]);
        let budget = Budget { size: 100, bitops: 1 };
        let err = solve_exact(&inst, &budget).unwrap_err();
        match err {
            Error::Infeasible { .. } => {}
            other => panic!("expected infeasibility, got {other}"),
        }
        let err2 = brute_force(&inst, &budget).unwrap_err();
        assert!(matches!(err2, Error::Infeasible { .. }));
    }

    #[test]
    fn pinned_layer_is_respected() {
        let mut inst = two_layer_instance(&[]);
        inst.layers[0].pinned = Some(8);
        let budget = Budget {
            size: 100 * 8 + 100 * 4,
            bitops: u64::MAX / 2,
        };
        let sol = solve_exact(&inst, &budget).unwrap();
        assert_eq!(sol.bits[0], 8);
        assert_eq!(sol.bits[1], 4);
        assert_eq!(brute_force(&inst, &budget).unwrap(), sol);
    }

    #[test]
    fn weightless_layer_takes_max_bits_when_free() {
        let mut inst = two_layer_instance(&[]);
        inst.layers.push(LayerSpec {
            id: LayerId::parse("b0.post_softmax").unwrap(),
            weight_count: 0,
            macs: 0,
            omega: 0.01,
            pinned: None,
        });
        let budget = budget_from_fixed(&inst, 3).unwrap();
        let sol = solve_exact(&inst, &budget).unwrap();
        assert_eq!(sol.bits[2], 4);
    }

    #[test]
    fn orientation_switch_changes_objective_sign() {
        let lambda = &[((LayerKind::Qkv, 4), 0.5)];
        let mut inst = two_layer_instance(lambda);
        let (phi_pen, _, _) = evaluate_assignment(&inst, &[4, 2]).unwrap();
        inst.orientation = LambdaOrientation::PenalizeLowBits;
        let (phi_rew, _, _) = evaluate_assignment(&inst, &[4, 2]).unwrap();
        assert!((phi_rew - phi_pen - 2.0 * 0.5 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn solver_matches_brute_force_on_random_instances() {
        let mut rng = crate::rnd::rng_from_seed(4242);
        let kinds = [
            "patch_embed",
            "b0.qkv",
            "b0.matmul1",
            "b0.post_softmax",
            "b0.proj",
            "b0.fc1",
            "b0.post_gelu",
            "b0.fc2",
            "b1.qkv",
            "head",
        ];
        for trial in 0..100 {
            let n = rng.gen_range(2..=7);
            let layers: Vec<LayerSpec> = (0..n)
                .map(|i| LayerSpec {
                    id: LayerId::parse(kinds[i]).unwrap(),
                    weight_count: rng.gen_range(0..500),
                    macs: rng.gen_range(1..1000),
                    omega: rng.gen_range(0.0..1.0),
                    pinned: if rng.gen_bool(0.1) { Some(8) } else { None },
                })
                .collect();
            let mut lambda = BTreeMap::new();
            for l in &layers {
                for b in [2u8, 3, 4, 5, 6] {
                    if rng.gen_bool(0.5) {
                        lambda.insert((l.id.kind, b), rng.gen_range(0.0..0.3));
                    }
                }
            }
            let inst = AllocationInstance {
                layers,
                candidates: vec![2, 3, 4, 5, 6],
                lambda,
                orientation: if trial % 2 == 0 {
                    LambdaOrientation::PenalizeHighBits
                } else {
                    LambdaOrientation::PenalizeLowBits
                },
            };
            let b_fixed = [2u8, 3, 4][rng.gen_range(0..3)];
            let budget = budget_from_fixed(&inst, b_fixed).unwrap();
            let oracle = brute_force(&inst, &budget);
            let fast = solve_exact(&inst, &budget);
            match (oracle, fast) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a.bits, b.bits, "trial {trial}");
                    assert_eq!(a.objective, b.objective, "trial {trial}");
                    assert_eq!((a.size, a.bitops), (b.size, b.bitops));
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("trial {trial}: oracle {a:?} vs solver {b:?}"),
            }
        }
    }
}
