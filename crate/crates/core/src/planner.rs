//! Sensitivity-ordered mixed-precision bit allocation.
//!
//! Layers with a larger average Hessian trace must get at least as many bits
//! as less sensitive layers. Admissible assignments are enumerated directly
//! (no filtering of the full `m^L` space), scored by
//! `Ω = Σ_i avg_trace_i · ‖Q(W_i) − W_i‖²`, and the minimal-Ω assignment under
//! a size budget is selected.

use std::io::Write;

use num_bigint::BigUint;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::quant::{layer_perturbation, size_bytes, RangePolicy, FULL_PRECISION_BITS};
use crate::trace::fmt_float;

/// Sorted, de-duplicated set of allowed bit widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BitMenu(Vec<u32>);

impl BitMenu {
    pub fn new(mut bits: Vec<u32>) -> Result<Self> {
        bits.sort_unstable();
        bits.dedup();
        if bits.is_empty() {
            return Err(Error::InvalidConfig("bit menu is empty".into()));
        }
        if let Some(&b) = bits.iter().find(|&&b| b == 0 || b > FULL_PRECISION_BITS) {
            return Err(Error::InvalidConfig(format!(
                "bit width {b} outside 1..={FULL_PRECISION_BITS}"
            )));
        }
        Ok(Self(bits))
    }

    pub fn widths(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        *self.0.last().expect("non-empty menu")
    }
}

impl std::str::FromStr for BitMenu {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::InvalidConfig(format!("bit list `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    /// Layer `i` outranks `j` only when `t_i − t_j` exceeds their combined standard error.
    #[default]
    StderrAware,
    /// Raw means decide; equal means fall back to layer index, giving a total order.
    Strict,
}

/// The "must have at least as many bits" relation between layers.
#[derive(Debug, Clone)]
pub struct SensitivityOrder {
    traces: Vec<f64>,
    /// Layers sorted by decreasing trace (index breaks ties).
    order: Vec<usize>,
    /// `above[p]`: positions before `p` in `order` whose layer outranks `order[p]`.
    above: Vec<Vec<usize>>,
    negative: bool,
}

impl SensitivityOrder {
    pub fn new(avg_traces: &[f64], stderr: Option<&[f64]>, mode: OrderingMode) -> Result<Self> {
        if avg_traces.is_empty() {
            return Err(Error::InvalidConfig("no layers to order".into()));
        }
        if avg_traces.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("average traces must be finite".into()));
        }
        if let Some(se) = stderr {
            if se.len() != avg_traces.len() {
                return Err(Error::DimensionMismatch {
                    expected: avg_traces.len(),
                    got: se.len(),
                });
            }
            if se.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::InvalidConfig("standard errors must be finite and ≥ 0".into()));
            }
        }
        let n = avg_traces.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| avg_traces[b].total_cmp(&avg_traces[a]).then(a.cmp(&b)));
        let outranks = |i: usize, j: usize| match mode {
            OrderingMode::Strict => true,
            OrderingMode::StderrAware => {
                let tol = stderr.map_or(0.0, |s| s[i].hypot(s[j]));
                avg_traces[i] - avg_traces[j] > tol
            }
        };
        let above = (0..n)
            .map(|p| (0..p).filter(|&q| outranks(order[q], order[p])).collect())
            .collect();
        Ok(Self {
            traces: avg_traces.to_vec(),
            order,
            above,
            negative: avg_traces.iter().any(|&t| t < 0.0),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.order.len()
    }

    /// Layer indices from most to least sensitive.
    pub fn sensitivity_order(&self) -> &[usize] {
        &self.order
    }

    pub fn traces(&self) -> &[f64] {
        &self.traces
    }

    pub fn has_negative_traces(&self) -> bool {
        self.negative
    }

    /// True when layer `i` must receive at least as many bits as layer `j`.
    pub fn outranks(&self, i: usize, j: usize) -> bool {
        let pos = |l: usize| self.order.iter().position(|&x| x == l);
        match (pos(i), pos(j)) {
            (Some(pi), Some(pj)) => self.above[pj].contains(&pi),
            _ => false,
        }
    }

    /// Whether `bits` (in layer order) respects every constraint.
    pub fn admits(&self, bits: &[u32]) -> bool {
        bits.len() == self.order.len()
            && self.above.iter().enumerate().all(|(p, above)| {
                above
                    .iter()
                    .all(|&q| bits[self.order[q]] >= bits[self.order[p]])
            })
    }
}

/// Streams admissible assignments in descending lexicographic order of the
/// bits read along the sensitivity order. Yields bits in layer order.
pub struct Admissible<'a> {
    order: &'a SensitivityOrder,
    menu: &'a BitMenu,
    /// Menu index per sensitivity position; `None` once exhausted.
    state: Option<Vec<usize>>,
}

impl<'a> Admissible<'a> {
    fn new(order: &'a SensitivityOrder, menu: &'a BitMenu) -> Self {
        let mut state = vec![0; order.num_layers()];
        fill_max(order, menu, &mut state, 0);
        Self {
            order,
            menu,
            state: Some(state),
        }
    }
}

/// Sets positions `from..` to the largest menu index their constraints allow.
fn fill_max(order: &SensitivityOrder, menu: &BitMenu, state: &mut [usize], from: usize) {
    for p in from..state.len() {
        state[p] = order.above[p]
            .iter()
            .map(|&q| state[q])
            .min()
            .unwrap_or(menu.len() - 1);
    }
}

impl Iterator for Admissible<'_> {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let state = self.state.as_mut()?;
        let mut bits = vec![0; state.len()];
        for (p, &k) in state.iter().enumerate() {
            bits[self.order.order[p]] = self.menu.0[k];
        }
        match state.iter().rposition(|&k| k > 0) {
            Some(p) => {
                state[p] -= 1;
                fill_max(self.order, self.menu, state, p + 1);
            }
            None => self.state = None,
        }
        Some(bits)
    }
}

pub fn admissible_iter<'a>(order: &'a SensitivityOrder, menu: &'a BitMenu) -> Admissible<'a> {
    Admissible::new(order, menu)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibleSet {
    pub assignments: Vec<Vec<u32>>,
    /// More assignments existed beyond `limit`.
    pub truncated: bool,
    pub negative_traces: bool,
}

pub fn admissible_set(order: &SensitivityOrder, menu: &BitMenu, limit: Option<usize>) -> AdmissibleSet {
    let mut it = admissible_iter(order, menu);
    let cap = limit.unwrap_or(usize::MAX);
    let assignments: Vec<Vec<u32>> = it.by_ref().take(cap).collect();
    AdmissibleSet {
        truncated: it.next().is_some(),
        assignments,
        negative_traces: order.has_negative_traces(),
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Number of admissible assignments for `layers` distinct traces and a menu of `menu` widths:
/// `Σ_{j=1}^{m} C(m, j) · C(L − 1, j − 1)`.
pub fn cardinality_b(layers: u64, menu: u64) -> BigUint {
    (1..=menu)
        .map(|j| binomial(menu, j) * binomial(layers.saturating_sub(1), j - 1))
        .sum()
}

/// Number of ordered set partitions of `layers` layers: `Σ_i i! · S(L, i)`.
pub fn cardinality_c(layers: usize) -> BigUint {
    // S(n, k) = k S(n−1, k) + S(n−1, k−1), one row at a time.
    let mut row = vec![BigUint::from(1u32)];
    for n in 1..=layers {
        let mut next = vec![BigUint::ZERO; n + 1];
        for k in 1..=n {
            let keep = if k < n { &row[k] * k } else { BigUint::ZERO };
            next[k] = keep + &row[k - 1];
        }
        row = next;
    }
    let mut factorial = BigUint::from(1u32);
    let mut total = BigUint::ZERO;
    for (i, s) in row.iter().enumerate().skip(1) {
        factorial *= i;
        total += &factorial * s;
    }
    total
}

/// `L!`, the count when every layer gets its own precision level.
pub fn cardinality_layerwise(layers: u64) -> BigUint {
    (1..=layers).map(BigUint::from).product()
}

/// `m^L`, the unconstrained search space.
pub fn cardinality_unconstrained(layers: u32, menu: u64) -> BigUint {
    BigUint::from(menu).pow(layers)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Omega {
    pub total: f64,
    pub per_layer: Vec<f64>,
}

/// Per-layer weight perturbations `‖Q(W_i) − W_i‖²` for every menu width.
#[derive(Debug, Clone)]
pub struct OmegaTable {
    traces: Vec<f64>,
    menu: BitMenu,
    perturbations: Vec<Vec<f64>>,
    weight_counts: Vec<usize>,
}

impl OmegaTable {
    pub fn new(model: &Model, avg_traces: &[f64], menu: &BitMenu, policy: RangePolicy) -> Result<Self> {
        if avg_traces.len() != model.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: model.num_layers(),
                got: avg_traces.len(),
            });
        }
        let perturbations = model
            .layers()
            .iter()
            .map(|l| {
                menu.widths()
                    .iter()
                    .map(|&b| layer_perturbation(&l.weight, b, policy))
                    .collect()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self {
            traces: avg_traces.to_vec(),
            menu: menu.clone(),
            perturbations,
            weight_counts: model.weight_counts(),
        })
    }

    pub fn perturbation(&self, layer: usize, bits: u32) -> Option<f64> {
        let k = self.menu.widths().iter().position(|&b| b == bits)?;
        Some(self.perturbations.get(layer)?[k])
    }

    pub fn evaluate(&self, bits: &[u32]) -> Result<Omega> {
        if bits.len() != self.traces.len() {
            return Err(Error::DimensionMismatch {
                expected: self.traces.len(),
                got: bits.len(),
            });
        }
        let per_layer = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                self.perturbation(i, b)
                    .map(|p| self.traces[i] * p)
                    .ok_or_else(|| Error::InvalidConfig(format!("bit width {b} is not in the menu")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Omega {
            total: per_layer.iter().sum(),
            per_layer,
        })
    }

    pub fn size_bytes(&self, bits: &[u32]) -> u64 {
        size_bytes(&self.weight_counts, bits)
    }
}

/// `Ω` of one assignment.
pub fn omega(model: &Model, avg_traces: &[f64], bits: &[u32], policy: RangePolicy) -> Result<Omega> {
    let menu = BitMenu::new(bits.to_vec())?;
    OmegaTable::new(model, avg_traces, &menu, policy)?.evaluate(bits)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// Position in the enumeration order.
    pub id: usize,
    pub bits: Vec<u32>,
    pub size_bytes: u64,
    pub omega: f64,
    pub per_layer_omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub id: usize,
    pub bits: Vec<u32>,
    pub size_bytes: u64,
    pub omega: f64,
    pub dominated: bool,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub chosen: Candidate,
    pub frontier: Vec<FrontierPoint>,
    pub truncated: bool,
    pub negative_traces: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest<'a> {
    pub menu: &'a BitMenu,
    pub target_bytes: u64,
    pub policy: RangePolicy,
    /// Cap on enumerated assignments.
    pub limit: Option<usize>,
}

/// Minimal-Ω admissible assignment with `size ≤ target_bytes`.
///
/// Ties go to the smaller size, then to the lexicographically smallest bits
/// in layer order.
pub fn pareto_select(model: &Model, order: &SensitivityOrder, req: &PlanRequest) -> Result<Selection> {
    if order.num_layers() != model.num_layers() {
        return Err(Error::DimensionMismatch {
            expected: model.num_layers(),
            got: order.num_layers(),
        });
    }
    let table = OmegaTable::new(model, order.traces(), req.menu, req.policy)?;
    let min_size = table.size_bytes(&vec![req.menu.min(); model.num_layers()]);
    if min_size > req.target_bytes {
        return Err(Error::Infeasible {
            target: req.target_bytes,
            min_size,
        });
    }
    let set = admissible_set(order, req.menu, req.limit);
    let mut candidates = Vec::with_capacity(set.assignments.len());
    for (id, bits) in set.assignments.into_iter().enumerate() {
        let om = table.evaluate(&bits)?;
        candidates.push(Candidate {
            id,
            size_bytes: table.size_bytes(&bits),
            bits,
            omega: om.total,
            per_layer_omega: om.per_layer,
        });
    }
    let chosen = candidates
        .iter()
        .filter(|c| c.size_bytes <= req.target_bytes)
        .min_by(|a, b| {
            a.omega
                .total_cmp(&b.omega)
                .then(a.size_bytes.cmp(&b.size_bytes))
                .then_with(|| a.bits.cmp(&b.bits))
        })
        .cloned()
        .ok_or(Error::Infeasible {
            target: req.target_bytes,
            min_size,
        })?;
    let points: Vec<(u64, f64)> = candidates.iter().map(|c| (c.size_bytes, c.omega)).collect();
    let dominated = dominated_flags(&points);
    let frontier = candidates
        .into_iter()
        .zip(dominated)
        .map(|(c, dominated)| FrontierPoint {
            chosen: c.id == chosen.id,
            id: c.id,
            bits: c.bits,
            size_bytes: c.size_bytes,
            omega: c.omega,
            dominated,
        })
        .collect();
    Ok(Selection {
        chosen,
        frontier,
        truncated: set.truncated,
        negative_traces: set.negative_traces,
    })
}

/// A point is dominated when another has size ≤ and Ω ≤ with at least one strict.
pub fn dominated_flags(points: &[(u64, f64)]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .0
            .cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut flags = vec![false; points.len()];
    let mut best_smaller = f64::INFINITY;
    let mut start = 0;
    while start < idx.len() {
        let size = points[idx[start]].0;
        let end = start + idx[start..].iter().take_while(|&&i| points[i].0 == size).count();
        // Sorted by Ω within the group, so the first entry holds the group minimum.
        let group_min = points[idx[start]].1;
        for &i in &idx[start..end] {
            let om = points[i].1;
            flags[i] = best_smaller <= om || group_min < om;
        }
        best_smaller = best_smaller.min(group_min);
        start = end;
    }
    flags
}

pub const FRONTIER_CSV_HEADER: &str = "assignment_id,bits,size_bytes,omega,dominated,chosen";

pub fn write_frontier_csv<W: Write>(frontier: &[FrontierPoint], mut out: W) -> Result<()> {
    let io = |e| Error::io("<frontier csv>", e);
    writeln!(out, "{FRONTIER_CSV_HEADER}").map_err(io)?;
    for p in frontier {
        let bits: Vec<String> = p.bits.iter().map(u32::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.id,
            bits.join(";"),
            p.size_bytes,
            fmt_float(p.omega),
            p.dominated,
            p.chosen
        )
        .map_err(io)?;
    }
    Ok(())
}
