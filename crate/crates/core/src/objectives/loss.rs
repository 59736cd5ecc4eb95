use super::{ClassWeights, ObjectiveError};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Weighted binary cross-entropy, mean over pixels. `target` holds 0/1 per
/// element of `p`.
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    target: &[T],
    w: &ClassWeights,
    delta: f64,
) -> Result<Var, ObjectiveError> {
    w.validate()?;
    let c = |v: f64| T::from_f64_lossy(v);
    Ok(g.weighted_bce(p, target, c(w.seg[0]), c(w.seg[1]), c(delta))?)
}

/// Class index per pixel of an `N×C×…` (or `C×…`) one-hot tensor.
pub fn one_hot_to_indices<T: Scalar>(y: &Tensor<T>, batched: bool) -> Result<Vec<usize>, ObjectiveError> {
    let s = y.shape();
    let axis = usize::from(batched);
    if s.len() <= axis {
        return Err(ObjectiveError::ShapeMismatch(format!("one-hot target shaped {s:?}")));
    }
    let n: usize = s[..axis].iter().product();
    let c = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for i in 0..inner {
            let mut hot = None;
            for k in 0..c {
                let v = y.data()[(b * c + k) * inner + i];
                if v == T::one() && hot.is_none() {
                    hot = Some(k);
                } else if v != T::zero() {
                    return Err(ObjectiveError::NotOneHot(b * inner + i));
                }
            }
            out.push(hot.ok_or(ObjectiveError::NotOneHot(b * inner + i))?);
        }
    }
    Ok(out)
}

/// Weighted negative log-likelihood of the true class, mean over pixels;
/// `p` is `N×C×…`, `target` holds one class index per pixel.
pub fn damage_loss_indices<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    target: &[usize],
    w: &ClassWeights,
    delta: f64,
) -> Result<Var, ObjectiveError> {
    w.validate()?;
    let classes = g.shape(p).get(1).copied().unwrap_or(0);
    if classes != w.damage.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{classes} predicted classes, {} weights",
            w.damage.len()
        )));
    }
    if let Some(&class) = target.iter().find(|&&t| t >= classes) {
        return Err(ObjectiveError::ClassOutOfRange { class, classes });
    }
    let weights: Vec<T> = w.damage.iter().map(|&v| T::from_f64_lossy(v)).collect();
    Ok(g.weighted_nll(p, target, &weights, T::from_f64_lossy(delta))?)
}

/// [`damage_loss_indices`] with an `N×C×…` one-hot target.
pub fn damage_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    target: &Tensor<T>,
    w: &ClassWeights,
    delta: f64,
) -> Result<Var, ObjectiveError> {
    if g.shape(p) != target.shape() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.shape(p),
            target.shape()
        )));
    }
    let idx = one_hot_to_indices(target, true)?;
    damage_loss_indices(g, p, &idx, w, delta)
}

/// Labels for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a, T> {
    pub seg_pre: &'a [T],
    pub seg_post: &'a [T],
    pub damage: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub seg_pre: Option<Var>,
    pub seg_post: Option<Var>,
    pub damage: Var,
    pub total: Var,
}

/// `L_s(pre) + L_s(post) + L_d`, or `L_d` alone when `seg` is `None`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    seg: Option<(Var, Var)>,
    damage: Var,
    targets: LossTargets<'_, T>,
    w: &ClassWeights,
    delta: f64,
) -> Result<LossTerms, ObjectiveError> {
    let ld = damage_loss_indices(g, damage, targets.damage, w, delta)?;
    let Some((pa, pb)) = seg else {
        return Ok(LossTerms {
            seg_pre: None,
            seg_post: None,
            damage: ld,
            total: ld,
        });
    };
    let la = seg_loss(g, pa, targets.seg_pre, w, delta)?;
    let lb = seg_loss(g, pb, targets.seg_post, w, delta)?;
    let s = g.add(la, lb)?;
    let total = g.add(s, ld)?;
    Ok(LossTerms {
        seg_pre: Some(la),
        seg_post: Some(lb),
        damage: ld,
        total,
    })
}
