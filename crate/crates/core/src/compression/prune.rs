//! Structured pruning: weight groups, learned thresholds, masked forward,
//! and structural export.
//!
//! Groups map one-to-one onto removable structures: an LSTM hidden unit
//! (its gate rows, recurrent column, and bias entries), an FC input column,
//! or a context dimension of the skip controller. Each threshold-bearing
//! layer k owns a learnable tau_k = softplus(rho_k); a group is kept when
//! its L2 norm reaches the threshold. fc1 input columns that read LSTM2
//! outputs are tied to the corresponding LSTM2 unit group so a pruned unit
//! removes its column structurally.

use std::collections::HashSet;

use ndarray::Axis;

use crate::enhancer::{ArchConfig, EnhancerModel, TensorId, TensorView, TensorViewMut};
use crate::error::{Error, Result};
use crate::nn::sigmoid;

/// Mask value per group, in group order. Hard masks are exactly 0.0 or 1.0;
/// soft masks are sigmoid relaxations in (0, 1).
pub type MaskVec = Vec<f64>;

/// Forward style for mask evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    /// Binary masks (training/inference forward); gradients use the sigmoid
    /// surrogate.
    Hard,
    /// Sigmoid-relaxed masks; exact gradients, used for finite-difference
    /// validation.
    Soft,
}

/// Which structure a group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupLayer {
    Lstm1,
    Lstm2,
    /// fc1 input columns reading LSTM2 outputs; tied to Lstm2 groups.
    Fc1,
    /// fc2 input columns, i.e. fc1 output units.
    Fc2,
    /// Context dimensions of the skip controller.
    Ctx,
}

/// One removable structure.
#[derive(Debug, Clone)]
pub struct WeightGroup {
    pub layer: GroupLayer,
    /// Unit / column / dimension index within the layer.
    pub unit: usize,
    /// Slot references `(tensor, flat row-major index)`. The recurrent
    /// diagonal appears twice (once in the row span, once in the column
    /// span), matching the published slot arithmetic.
    pub members: Vec<(TensorId, usize)>,
    /// Deduplicated coordinates, used for norms and masking.
    unique: Vec<(TensorId, usize)>,
    /// Index of the controlling group when this group's mask is tied.
    pub tied_to: Option<usize>,
}

impl WeightGroup {
    fn new(
        layer: GroupLayer,
        unit: usize,
        members: Vec<(TensorId, usize)>,
        tied_to: Option<usize>,
    ) -> Self {
        let mut seen = HashSet::with_capacity(members.len());
        let mut unique = Vec::with_capacity(members.len());
        for &m in &members {
            if seen.insert(m) {
                unique.push(m);
            }
        }
        Self {
            layer,
            unit,
            members,
            unique,
            tied_to,
        }
    }

    pub fn unique_coords(&self) -> &[(TensorId, usize)] {
        &self.unique
    }
}

/// All groups of one architecture plus its threshold-layer table.
#[derive(Debug, Clone)]
pub struct GroupSet {
    pub groups: Vec<WeightGroup>,
    /// Threshold-bearing layers, in tau index order.
    pub threshold_layers: Vec<GroupLayer>,
}

/// Learnable pruning state: per-layer threshold parameters and the
/// surrogate temperature.
#[derive(Debug, Clone)]
pub struct PruneState {
    /// tau_k = softplus(rho_k) keeps thresholds nonnegative. Initialized
    /// very negative so training starts with no pruning.
    pub rho: Vec<f64>,
    /// Sigmoid surrogate temperature.
    pub temperature: f64,
    /// Penalty weight.
    pub lambda: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl PruneState {
    pub fn new(set: &GroupSet, lambda: f64, temperature: f64) -> Self {
        Self {
            rho: vec![-12.0; set.threshold_layers.len()],
            temperature,
            lambda,
        }
    }

    /// Current thresholds tau_k = softplus(rho_k).
    pub fn taus(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }
}

/// Flat row-major indices of one matrix row.
fn row_span(row: usize, ncols: usize) -> impl Iterator<Item = usize> {
    (0..ncols).map(move |c| row * ncols + c)
}

/// Flat row-major index at (row, col).
fn at(row: usize, col: usize, ncols: usize) -> usize {
    row * ncols + col
}

impl GroupSet {
    /// Build the group list for an architecture, in canonical order:
    /// lstm1 units, lstm2 units, fc1 columns (tied), fc2 columns, context
    /// dimensions.
    pub fn for_arch(arch: &ArchConfig) -> GroupSet {
        let (n_mel, h1, h2, fu) = (arch.n_mel, arch.hidden1, arch.hidden2, arch.fc1_units);
        let mut groups = Vec::new();

        // LSTM unit group: gate rows of w_x and w_h, the recurrent column,
        // and the gate bias entries.
        let lstm_group = |wx: TensorId, wh: TensorId, b: TensorId, h: usize, input: usize, j: usize| {
            let mut members = Vec::with_capacity(4 * (input + 2 * h + 1));
            for gate in 0..4 {
                members.extend(row_span(gate * h + j, input).map(|i| (wx, i)));
            }
            for gate in 0..4 {
                members.extend(row_span(gate * h + j, h).map(|i| (wh, i)));
            }
            for gate in 0..4 {
                members.extend((0..h).map(|u| (wh, at(gate * h + u, j, h))));
            }
            for gate in 0..4 {
                members.push((b, gate * h + j));
            }
            members
        };

        for j in 0..h1 {
            groups.push(WeightGroup::new(
                GroupLayer::Lstm1,
                j,
                lstm_group(TensorId::Lstm1Wx, TensorId::Lstm1Wh, TensorId::Lstm1B, h1, n_mel, j),
                None,
            ));
        }
        for j in 0..h2 {
            groups.push(WeightGroup::new(
                GroupLayer::Lstm2,
                j,
                lstm_group(TensorId::Lstm2Wx, TensorId::Lstm2Wh, TensorId::Lstm2B, h2, h1, j),
                None,
            ));
        }
        // fc1 columns reading LSTM2 outputs: tied to the unit that feeds them.
        let bn_width = arch.bn_features();
        for j in 0..h2 {
            let members = (0..fu).map(|r| (TensorId::Fc1W, at(r, j, bn_width))).collect();
            groups.push(WeightGroup::new(GroupLayer::Fc1, j, members, Some(h1 + j)));
        }
        // fc2 columns: one per fc1 output unit.
        for j in 0..fu {
            let members = (0..arch.n_mel)
                .map(|r| (TensorId::Fc2W, at(r, j, fu)))
                .collect();
            groups.push(WeightGroup::new(GroupLayer::Fc2, j, members, None));
        }
        // Context dimensions: projection row, its bias, and the fc1 column
        // that reads the dimension.
        if let Some(dim_c) = arch.dim_c {
            for j in 0..dim_c {
                let mut members: Vec<(TensorId, usize)> =
                    row_span(j, n_mel).map(|i| (TensorId::CtxW, i)).collect();
                members.push((TensorId::CtxB, j));
                members.extend((0..fu).map(|r| (TensorId::Fc1W, at(r, h2 + j, bn_width))));
                groups.push(WeightGroup::new(GroupLayer::Ctx, j, members, None));
            }
        }

        let mut threshold_layers = vec![GroupLayer::Lstm1, GroupLayer::Lstm2, GroupLayer::Fc2];
        if arch.dim_c.is_some() {
            threshold_layers.push(GroupLayer::Ctx);
        }
        GroupSet {
            groups,
            threshold_layers,
        }
    }

    /// tau index for a threshold-bearing layer.
    pub fn threshold_index(&self, layer: GroupLayer) -> Option<usize> {
        self.threshold_layers.iter().position(|&l| l == layer)
    }

    /// Overwrite tied groups' mask values with their controlling group's.
    pub fn resolve_ties(&self, masks: &mut MaskVec) {
        for (i, g) in self.groups.iter().enumerate() {
            if let Some(master) = g.tied_to {
                masks[i] = masks[master];
            }
        }
    }

    /// Count of unique parameters covered by at least one group.
    pub fn covered_params(&self) -> usize {
        let mut seen = HashSet::new();
        for g in &self.groups {
            for &c in g.unique_coords() {
                seen.insert(c);
            }
        }
        seen.len()
    }

    /// Coordinate-level view of the grouping: each covered parameter with
    /// the one or two groups whose masks scale it (recurrent off-diagonals
    /// sit in both a row group and a column group).
    pub fn cover_map(&self) -> CoverMap {
        let mut index: std::collections::HashMap<(TensorId, usize), (usize, Option<usize>)> =
            std::collections::HashMap::new();
        let mut order = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            for &coord in g.unique_coords() {
                match index.entry(coord) {
                    std::collections::hash_map::Entry::Vacant(slot) => {
                        slot.insert((gi, None));
                        order.push(coord);
                    }
                    std::collections::hash_map::Entry::Occupied(mut slot) => {
                        let (first, second) = slot.get_mut();
                        if *first != gi && *second != Some(gi) {
                            assert!(second.is_none(), "coordinate covered by three groups");
                            *second = Some(gi);
                        }
                    }
                }
            }
        }
        let entries = order
            .into_iter()
            .map(|coord| {
                let &(a, b) = index.get(&coord).unwrap();
                (coord, a, b)
            })
            .collect();
        CoverMap { entries }
    }
}

/// Flattened coordinate -> covering groups table, built once per group set.
#[derive(Debug, Clone)]
pub struct CoverMap {
    /// `((tensor, flat index), first group, optional second group)`.
    pub entries: Vec<((TensorId, usize), usize, Option<usize>)>,
}

/// Convert a gradient with respect to the masked weights into a gradient
/// with respect to the raw weights, and collect the gradient with respect
/// to each group's mask value.
///
/// On entry `grads` holds `dL/d(masked)`; covered coordinates are rewritten
/// in place to `dL/d(raw)` via the product rule of `masked_i = raw_i * prod
/// of covering masks`. The returned vector is `dL/dr_g` with tied groups
/// already folded into their controlling group.
pub fn pull_back_masked_grads(
    raw: &EnhancerModel,
    set: &GroupSet,
    cover: &CoverMap,
    masks: &MaskVec,
    grads: &mut EnhancerModel,
) -> MaskVec {
    let mut dr = vec![0.0; set.groups.len()];
    for &((id, flat), a, b) in &cover.entries {
        let g = read_coord(grads, id, flat);
        let w = read_coord(raw, id, flat);
        match b {
            None => {
                update_coord(grads, id, flat, |_| g * masks[a]);
                dr[a] += g * w;
            }
            Some(b) => {
                update_coord(grads, id, flat, |_| g * masks[a] * masks[b]);
                dr[a] += g * w * masks[b];
                dr[b] += g * w * masks[a];
            }
        }
    }
    for (i, grp) in set.groups.iter().enumerate() {
        if let Some(master) = grp.tied_to {
            dr[master] += dr[i];
            dr[i] = 0.0;
        }
    }
    dr
}

/// Push mask-value gradients through the gate function
/// `r = step/sigmoid(T (||w_g||_raw - tau_k))` into the threshold
/// parameters and the raw weights. Hard mode substitutes the sigmoid
/// surrogate slope for the indicator's derivative.
pub fn gate_pullback(
    raw: &EnhancerModel,
    set: &GroupSet,
    state: &PruneState,
    dr: &MaskVec,
    grads: &mut EnhancerModel,
    rho_grads: &mut [f64],
) {
    let taus = state.taus();
    let t = state.temperature;
    for (i, g) in set.groups.iter().enumerate() {
        if g.tied_to.is_some() || dr[i] == 0.0 {
            continue;
        }
        let k = set.threshold_index(g.layer).unwrap();
        let norm = group_norm(raw, g);
        let sig = sigmoid(t * (norm - taus[k]));
        let slope = t * sig * (1.0 - sig);
        let gate = dr[i] * slope;
        rho_grads[k] -= gate * sigmoid(state.rho[k]);
        if norm > 1e-300 {
            let coeff = gate / norm;
            for &(id, flat) in g.unique_coords() {
                let w = read_coord(raw, id, flat);
                update_coord(grads, id, flat, |acc| acc + coeff * w);
            }
        }
    }
}

fn read_coord(model: &EnhancerModel, id: TensorId, flat: usize) -> f64 {
    match model.tensor(id).expect("group references a tensor the model owns") {
        TensorView::Mat(m) => m.as_slice().expect("standard layout")[flat],
        TensorView::Vec(v) => v[flat],
        TensorView::Scalar(s) => s,
    }
}

fn update_coord(model: &mut EnhancerModel, id: TensorId, flat: usize, f: impl FnOnce(f64) -> f64) {
    match model
        .tensor_mut(id)
        .expect("group references a tensor the model owns")
    {
        TensorViewMut::Mat(m) => {
            let v = &mut m.as_slice_mut().expect("standard layout")[flat];
            *v = f(*v);
        }
        TensorViewMut::Vec(v) => v[flat] = f(v[flat]),
        TensorViewMut::Scalar(s) => *s = f(*s),
    }
}

/// L2 norm of one group's (deduplicated) weights.
pub fn group_norm(model: &EnhancerModel, group: &WeightGroup) -> f64 {
    group
        .unique_coords()
        .iter()
        .map(|&(id, flat)| {
            let w = read_coord(model, id, flat);
            w * w
        })
        .sum::<f64>()
        .sqrt()
}

/// Mask value per group: hard indicator or sigmoid relaxation of
/// `norm - tau`. Tied groups copy their controlling group.
pub fn eval_masks(
    model: &EnhancerModel,
    set: &GroupSet,
    state: &PruneState,
    mode: PruneMode,
) -> MaskVec {
    let taus = state.taus();
    let mut masks = Vec::with_capacity(set.groups.len());
    for g in &set.groups {
        let r = match g.tied_to {
            Some(master) => masks[master],
            None => {
                let k = set
                    .threshold_index(g.layer)
                    .expect("untied group has a threshold layer");
                let s = group_norm(model, g) - taus[k];
                match mode {
                    PruneMode::Hard => {
                        if s >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    PruneMode::Soft => sigmoid(state.temperature * s),
                }
            }
        };
        masks.push(r);
    }
    masks
}

/// Clone the model with every group's weights scaled by its mask value.
/// Coordinates covered by two groups (recurrent off-diagonals) receive the
/// product of both masks.
pub fn apply_masks(model: &EnhancerModel, set: &GroupSet, masks: &MaskVec) -> EnhancerModel {
    let mut out = model.clone();
    for (g, &r) in set.groups.iter().zip(masks.iter()) {
        if r == 1.0 {
            continue;
        }
        for &(id, flat) in g.unique_coords() {
            update_coord(&mut out, id, flat, |w| w * r);
        }
    }
    out
}

/// Penalty value `lambda * sum_g r_g * ||w_g||_2` against the given model's
/// weights (pass the quantized model to penalize quantized norms).
pub fn penalty(model: &EnhancerModel, set: &GroupSet, masks: &MaskVec, lambda: f64) -> f64 {
    lambda
        * set
            .groups
            .iter()
            .zip(masks.iter())
            .map(|(g, &r)| r * group_norm(model, g))
            .sum::<f64>()
}

/// Penalty value and its gradients.
///
/// In `Soft` mode the value uses sigmoid masks and the gradients are exact;
/// in `Hard` mode the value uses binary masks and the gradients substitute
/// the sigmoid surrogate for the indicator's derivative. Returns the value,
/// a model-shaped weight gradient, and the gradient for each rho_k.
pub fn penalty_with_grads(
    model: &EnhancerModel,
    set: &GroupSet,
    state: &PruneState,
    mode: PruneMode,
) -> (f64, EnhancerModel, Vec<f64>) {
    penalty_with_grads_on(model, model, set, state, mode)
}

/// [`penalty_with_grads`] with the mask indicator and the penalized norms
/// read from different models. The masks always gate on the raw weights'
/// norms (`gate_model`), while the norms entering the penalty sum come from
/// `norm_model` — pass the fake-quantized model there to penalize quantized
/// group energy. Norm-side gradients flow straight through the quantizer
/// onto the raw weights.
pub fn penalty_with_grads_on(
    gate_model: &EnhancerModel,
    norm_model: &EnhancerModel,
    set: &GroupSet,
    state: &PruneState,
    mode: PruneMode,
) -> (f64, EnhancerModel, Vec<f64>) {
    let taus = state.taus();
    let t = state.temperature;
    let lambda = state.lambda;
    let n = set.groups.len();

    let gate_norms: Vec<f64> = set.groups.iter().map(|g| group_norm(gate_model, g)).collect();
    let pen_norms: Vec<f64> = set.groups.iter().map(|g| group_norm(norm_model, g)).collect();
    // Mask value and surrogate slope per master group.
    let mut r = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for (i, g) in set.groups.iter().enumerate() {
        match g.tied_to {
            Some(master) => {
                r[i] = r[master];
            }
            None => {
                let k = set.threshold_index(g.layer).unwrap();
                let s = gate_norms[i] - taus[k];
                let sig = sigmoid(t * s);
                r[i] = match mode {
                    PruneMode::Hard => {
                        if s >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    PruneMode::Soft => sig,
                };
                slope[i] = t * sig * (1.0 - sig);
            }
        }
    }

    let mut value = 0.0;
    let mut grad = gate_model.zeroed_like();
    let mut rho_grad = vec![0.0; set.threshold_layers.len()];
    // Coefficient of each master group's mask in the penalty sum.
    let mut gate_coeff = vec![0.0; n];

    for (i, g) in set.groups.iter().enumerate() {
        let master = g.tied_to.unwrap_or(i);
        value += lambda * r[master] * pen_norms[i];
        gate_coeff[master] += lambda * pen_norms[i];
        // Norm-side gradient: lambda * r * w / ||w_g||.
        if pen_norms[i] > 1e-300 {
            let coeff = lambda * r[master] / pen_norms[i];
            for &(id, flat) in g.unique_coords() {
                let w = read_coord(norm_model, id, flat);
                update_coord(&mut grad, id, flat, |acc| acc + coeff * w);
            }
        }
    }
    // Gate-side gradient through r_master = sigma(T (||w_master|| - tau_k)),
    // whose argument is the raw-weight norm.
    for (i, g) in set.groups.iter().enumerate() {
        if g.tied_to.is_some() {
            continue;
        }
        let gate = gate_coeff[i] * slope[i];
        if gate == 0.0 {
            continue;
        }
        let k = set.threshold_index(g.layer).unwrap();
        rho_grad[k] -= gate * sigmoid(state.rho[k]);
        if gate_norms[i] > 1e-300 {
            let coeff = gate / gate_norms[i];
            for &(id, flat) in g.unique_coords() {
                let w = read_coord(gate_model, id, flat);
                update_coord(&mut grad, id, flat, |acc| acc + coeff * w);
            }
        }
    }
    (value, grad, rho_grad)
}

/// Alive/dead census and the size the exported model would have.
#[derive(Debug, Clone)]
pub struct PruneReport {
    /// `(layer, alive, total)` for each threshold-bearing layer.
    pub alive: Vec<(GroupLayer, usize, usize)>,
    /// Parameter count after structural removal.
    pub surviving_params: usize,
    /// Parameter count before pruning.
    pub total_params: usize,
    /// Fraction of parameters removed.
    pub sparsity: f64,
}

fn alive_units(set: &GroupSet, masks: &MaskVec, layer: GroupLayer) -> Vec<usize> {
    set.groups
        .iter()
        .zip(masks.iter())
        .filter(|(g, &r)| g.layer == layer && r > 0.5)
        .map(|(g, _)| g.unit)
        .collect()
}

/// Parameter count of the architecture with the given surviving dims.
fn arch_params(n_mel: usize, h1: usize, h2: usize, fu: usize, dim_c: Option<usize>) -> usize {
    let bn_width = h2 + dim_c.unwrap_or(0);
    let mut p = 4 * h1 * (n_mel + h1 + 1)
        + 4 * h2 * (h1 + h2 + 1)
        + 2 * bn_width
        + fu * bn_width
        + fu
        + n_mel * fu
        + n_mel;
    if let Some(c) = dim_c {
        p += c * n_mel + c // context projection
            + h2 + 1; // gate projection
    }
    p
}

/// Census of what pruning with these masks would leave.
pub fn prune_report(model: &EnhancerModel, set: &GroupSet, masks: &MaskVec) -> PruneReport {
    let arch = &model.arch;
    let h1 = alive_units(set, masks, GroupLayer::Lstm1).len();
    let h2 = alive_units(set, masks, GroupLayer::Lstm2).len();
    let fu = alive_units(set, masks, GroupLayer::Fc2).len();
    let dim_c = arch
        .dim_c
        .map(|_| alive_units(set, masks, GroupLayer::Ctx).len());

    let mut alive = vec![
        (GroupLayer::Lstm1, h1, arch.hidden1),
        (GroupLayer::Lstm2, h2, arch.hidden2),
        (GroupLayer::Fc2, fu, arch.fc1_units),
    ];
    if let (Some(c), Some(total)) = (dim_c, arch.dim_c) {
        alive.push((GroupLayer::Ctx, c, total));
    }
    let surviving_params = arch_params(arch.n_mel, h1, h2, fu, dim_c);
    let total_params = model.param_count();
    PruneReport {
        alive,
        surviving_params,
        total_params,
        sparsity: 1.0 - surviving_params as f64 / total_params as f64,
    }
}

/// Indices `gate*h + j` for every gate block and surviving unit.
fn gate_rows(alive: &[usize], h: usize) -> Vec<usize> {
    (0..4).flat_map(|g| alive.iter().map(move |&j| g * h + j)).collect()
}

/// Physically remove dead groups: slice every tensor down to surviving
/// units and shrink downstream dimensions consistently. The compact model
/// computes the same outputs as the masked model.
pub fn export_pruned(
    model: &EnhancerModel,
    set: &GroupSet,
    masks: &MaskVec,
) -> Result<EnhancerModel> {
    let arch = &model.arch;
    let alive1 = alive_units(set, masks, GroupLayer::Lstm1);
    let alive2 = alive_units(set, masks, GroupLayer::Lstm2);
    let alive_f = alive_units(set, masks, GroupLayer::Fc2);
    let alive_c = arch
        .dim_c
        .map(|_| alive_units(set, masks, GroupLayer::Ctx));

    for (name, count) in [
        ("lstm1", alive1.len()),
        ("lstm2", alive2.len()),
        ("fc1", alive_f.len()),
        ("context", alive_c.as_ref().map_or(1, |c| c.len())),
    ] {
        if count == 0 {
            return Err(Error::Prune(format!(
                "{name} pruned to zero units; nothing left to export"
            )));
        }
    }

    let (h1, h2) = (arch.hidden1, arch.hidden2);
    let rows1 = gate_rows(&alive1, h1);
    let rows2 = gate_rows(&alive2, h2);

    let lstm1 = crate::nn::Lstm::new(
        model.lstm1.w_x.select(Axis(0), &rows1),
        model
            .lstm1
            .w_h
            .select(Axis(0), &rows1)
            .select(Axis(1), &alive1),
        model.lstm1.b.select(Axis(0), &rows1),
    )?;
    let lstm2 = crate::nn::Lstm::new(
        model
            .lstm2
            .w_x
            .select(Axis(0), &rows2)
            .select(Axis(1), &alive1),
        model
            .lstm2
            .w_h
            .select(Axis(0), &rows2)
            .select(Axis(1), &alive2),
        model.lstm2.b.select(Axis(0), &rows2),
    )?;

    // Batch-norm features: surviving LSTM2 units, then surviving context
    // dimensions at their original h2 offset.
    let mut bn_idx = alive2.clone();
    if let Some(alive_c) = &alive_c {
        bn_idx.extend(alive_c.iter().map(|&j| h2 + j));
    }
    let mut bn = crate::nn::BatchNorm::new(bn_idx.len());
    bn.gamma = model.bn.gamma.select(Axis(0), &bn_idx);
    bn.beta = model.bn.beta.select(Axis(0), &bn_idx);
    bn.running_mean = model.bn.running_mean.select(Axis(0), &bn_idx);
    bn.running_var = model.bn.running_var.select(Axis(0), &bn_idx);
    bn.eps = model.bn.eps;
    bn.momentum = model.bn.momentum;

    let fc1 = crate::nn::Dense::new(
        model
            .fc1
            .w
            .select(Axis(0), &alive_f)
            .select(Axis(1), &bn_idx),
        model.fc1.b.select(Axis(0), &alive_f),
        model.fc1.act,
    )?;
    let fc2 = crate::nn::Dense::new(
        model.fc2.w.select(Axis(1), &alive_f),
        model.fc2.b.clone(),
        model.fc2.act,
    )?;

    let skip = match (&model.skip, &alive_c) {
        (Some(sk), Some(alive_c)) => Some(crate::skip::SkipParams {
            w_b: sk.w_b.select(Axis(0), &alive2),
            b_b: sk.b_b,
            w_c: sk.w_c.select(Axis(0), alive_c),
            b_c: sk.b_c.select(Axis(0), alive_c),
        }),
        (None, None) => None,
        _ => return Err(Error::Prune("skip controller/architecture mismatch".into())),
    };

    let out = EnhancerModel {
        arch: ArchConfig {
            n_mel: arch.n_mel,
            hidden1: alive1.len(),
            hidden2: alive2.len(),
            fc1_units: alive_f.len(),
            dim_c: alive_c.map(|c| c.len()),
            frame: arch.frame,
        },
        mel: model.mel.clone(),
        lstm1,
        lstm2,
        bn,
        fc1,
        fc2,
        skip,
    };
    out.validate()?;
    Ok(out)
}
