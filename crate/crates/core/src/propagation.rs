//! Voxel-level label propagation: the row-stochastic correlation map over a
//! pooled position grid, propagation of decoder logits through it, and the
//! correlation losses for the labeled and unlabeled branches.

use crate::autodiff::{
    avgpool, dice_ce_loss, flatten_spatial, gram, propagate_rows, scale, softmax_classes,
    softmax_rows, weighted_sum, Tape, Var, VarShape,
};
use crate::error::{Error, Result};
use crate::vol::{ClassVolume, Dims3, LabelVolume};

/// Row-stochastic pairwise similarity over `positions` pooled voxels.
#[derive(Debug, Clone)]
pub struct CorrelationMap {
    pub positions: usize,
    pub data: Vec<f64>,
}

impl CorrelationMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.positions..(i + 1) * self.positions]
    }

    pub fn rows_stochastic(&self, tol: f64) -> bool {
        (0..self.positions).all(|i| {
            let r = self.row(i);
            r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Builds the correlation map on the tape. The standard form scales scores
/// by `1/sqrt(dfeat)` inside the softmax; `literal_outer_scale` instead
/// divides the softmax output (which breaks row normalization and exists
/// only behind this flag).
pub fn correlation_map_var(
    tape: &mut Tape,
    e1: &Var,
    e2: &Var,
    literal_outer_scale: bool,
) -> Result<Var> {
    let d = match e1.shape {
        VarShape::Mat(d, _) => d,
        _ => return Err(Error::Shape("correlation features must be matrices".into())),
    };
    let scores = gram(tape, e1, e2)?;
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    if literal_outer_scale {
        let sm = softmax_rows(tape, &scores);
        Ok(scale(tape, &sm, inv_sqrt))
    } else {
        let scaled = scale(tape, &scores, inv_sqrt);
        Ok(softmax_rows(tape, &scaled))
    }
}

/// Plain-value correlation map from `(dfeat, positions)` feature matrices.
pub fn correlation_map(e1: &Var, e2: &Var) -> Result<CorrelationMap> {
    let mut tape = Tape::no_grad();
    let c = correlation_map_var(&mut tape, &e1.detach(), &e2.detach(), false)?;
    let positions = match c.shape {
        VarShape::Mat(p, _) => p,
        _ => unreachable!(),
    };
    Ok(CorrelationMap {
        positions,
        data: c.value().to_vec(),
    })
}

/// `out[k][i] = sum_j C[i][j] * pred[k][j]` on plain values.
pub fn propagate(pred: &[f64], classes: usize, c: &CorrelationMap) -> Result<Vec<f64>> {
    let p = c.positions;
    if pred.len() != classes * p {
        return Err(Error::Shape(format!(
            "prediction length {} vs {classes}x{p}",
            pred.len()
        )));
    }
    let mut tape = Tape::no_grad();
    let pv = Var::constant(pred.to_vec(), VarShape::Mat(classes, p));
    let cv = Var::constant(c.data.clone(), VarShape::Mat(p, p));
    Ok(propagate_rows(&mut tape, &pv, &cv)?.value().to_vec())
}

/// Majority-vote pooling of a hard label map onto the correlation grid,
/// lowest class index winning ties.
pub fn pool_labels_majority(lbl: &LabelVolume, factor: usize, classes: usize) -> Result<LabelVolume> {
    if factor == 0 || !lbl.dims.divisible_by(factor) {
        return Err(Error::Shape(format!(
            "label dims {} not divisible by pooling factor {factor}",
            lbl.dims
        )));
    }
    let od = Dims3::new(lbl.dims.l / factor, lbl.dims.w / factor, lbl.dims.h / factor);
    let mut out = LabelVolume::zeros(od);
    let mut counts = vec![0u32; classes];
    for zi in 0..od.l {
        for yi in 0..od.w {
            for xi in 0..od.h {
                counts.iter_mut().for_each(|c| *c = 0);
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let v = lbl.at(zi * factor + dz, yi * factor + dy, xi * factor + dx);
                            counts[v as usize] += 1;
                        }
                    }
                }
                let mut best = 0usize;
                for k in 1..classes {
                    if counts[k] > counts[best] {
                        best = k;
                    }
                }
                out.data[od.index(zi, yi, xi)] = best as u8;
            }
        }
    }
    Ok(out)
}

/// Pools full-resolution logits onto the correlation grid and spreads them
/// through the map; returns `(propagated (K, P) logits, grid dims)`.
pub fn propagate_pooled_logits(
    tape: &mut Tape,
    logits: &Var,
    c: &Var,
) -> Result<(Var, Dims3)> {
    let (_, dims) = logits.chan_parts();
    let p = match c.shape {
        VarShape::Mat(r, cc) if r == cc => r,
        _ => return Err(Error::Shape("correlation map must be square".into())),
    };
    // infer the cubic-ish grid from the position count
    let per_axis = (p as f64).cbrt().round() as usize;
    if per_axis.pow(3) != p {
        return Err(Error::Shape(format!("{p} positions do not form a cubic grid")));
    }
    if dims.l % per_axis != 0 || dims.w % per_axis != 0 || dims.h % per_axis != 0 {
        return Err(Error::Shape(format!(
            "logit dims {dims} incompatible with a {per_axis}^3 grid"
        )));
    }
    let factor = dims.l / per_axis;
    if dims.w / per_axis != factor || dims.h / per_axis != factor {
        return Err(Error::Shape("anisotropic pooling onto the correlation grid".into()));
    }
    let pooled = avgpool(tape, logits, factor)?;
    let (_, grid) = pooled.chan_parts();
    let flat = flatten_spatial(&pooled);
    let prop = propagate_rows(tape, &flat, c)?;
    Ok((prop, grid))
}

/// DiceCE of a propagated (softmaxed) prediction against a pooled one-hot
/// target over grid positions.
pub fn loss_corr_branch(tape: &mut Tape, propagated: &Var, target: &ClassVolume) -> Result<Var> {
    let probs = softmax_classes(tape, propagated);
    dice_ce_loss(tape, &probs, &target.data)
}

/// Total correlation loss: unlabeled branch (pseudo-label target) plus
/// labeled branch (ground-truth target).
pub fn loss_corr(tape: &mut Tape, unlabeled_term: Var, labeled_term: Var) -> Var {
    weighted_sum(tape, &[(unlabeled_term, 1.0), (labeled_term, 1.0)])
}
