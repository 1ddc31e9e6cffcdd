//! Proximal operators of the group penalties.
//!
//! Every operator maps `u` to `argmin_w ½‖u − w‖² + t·Ω(w)`. Tree-structured
//! families (partitions included) are handled by composing the per-group
//! operators from the innermost groups outwards.

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::groups::{tree_order, GroupStructure, Norm, StructureClass};

fn check_threshold(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("threshold must be non-negative, got {t}")));
    }
    Ok(())
}

fn check_len(u: &[f64], s: &GroupStructure) -> Result<()> {
    if u.len() != s.p() {
        return Err(Error::Dimension(format!(
            "vector has length {}, structure has p = {}",
            u.len(),
            s.p()
        )));
    }
    Ok(())
}

/// Elementwise soft-thresholding.
pub fn prox_l1(u: &[f64], t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    let mut out = u.to_vec();
    soft_threshold(&mut out, t);
    Ok(out)
}

pub(crate) fn soft_threshold(v: &mut [f64], t: f64) {
    for x in v.iter_mut() {
        let a = x.abs() - t;
        *x = if a > 0.0 { x.signum() * a } else { 0.0 };
    }
}

/// Block soft-thresholding: zero when `‖u‖₂ ≤ t`, otherwise shrink radially by `t`.
pub fn prox_group_l2(u: &[f64], t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    let mut out = u.to_vec();
    group_l2_in_place(&mut out, t);
    Ok(out)
}

pub(crate) fn group_l2_in_place(v: &mut [f64], t: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= t {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        let scale = (norm - t) / norm;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

/// Euclidean projection onto the ℓ1 ball of the given radius.
///
/// Finds the shrinkage level `τ` with a randomized-pivot partitioning of the
/// magnitudes (expected linear time, no sort).
pub fn project_l1_ball(u: &[f64], radius: f64) -> Result<Vec<f64>> {
    if radius.is_nan() || radius < 0.0 {
        return Err(Error::Domain(format!("radius must be non-negative, got {radius}")));
    }
    let mut out = u.to_vec();
    project_l1_in_place(&mut out, radius);
    Ok(out)
}

pub(crate) fn project_l1_in_place(v: &mut [f64], radius: f64) {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return;
    }
    if radius == 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let tau = l1_ball_threshold(v, radius);
    soft_threshold(v, tau);
}

/// `τ > 0` such that `Σ max(|v_j| − τ, 0) = radius`; requires `‖v‖₁ > radius > 0`.
fn l1_ball_threshold(v: &[f64], radius: f64) -> f64 {
    let mut work: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    // Fixed seed keeps the operator a deterministic function of its input.
    let mut rng = SmallRng::seed_from_u64(work.len() as u64);
    let (mut lo, mut hi) = (0, work.len());
    // sum and count of magnitudes known to exceed τ
    let mut sum = 0.0;
    let mut count = 0usize;
    while lo < hi {
        let k = rng.gen_range(lo..hi);
        work.swap(lo, k);
        let pivot = work[lo];
        let mut mid = lo + 1;
        for i in lo + 1..hi {
            if work[i] >= pivot {
                work.swap(i, mid);
                mid += 1;
            }
        }
        let ds: f64 = work[lo..mid].iter().sum();
        let dc = mid - lo;
        if (sum + ds) - (count + dc) as f64 * pivot < radius {
            sum += ds;
            count += dc;
            lo = mid;
        } else {
            hi = mid;
            lo += 1;
        }
    }
    (sum - radius) / count as f64
}

/// Prox of `t‖·‖∞`, computed as `u − Π_{‖·‖₁ ≤ t}(u)`.
pub fn prox_group_linf(u: &[f64], t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    let mut out = u.to_vec();
    group_linf_in_place(&mut out, t);
    Ok(out)
}

pub(crate) fn group_linf_in_place(v: &mut [f64], t: f64) {
    let mut proj = v.to_vec();
    project_l1_in_place(&mut proj, t);
    for (x, p) in v.iter_mut().zip(&proj) {
        *x -= p;
    }
}

pub(crate) fn group_prox_in_place(v: &mut [f64], t: f64, norm: Norm) {
    match norm {
        Norm::L2 => group_l2_in_place(v, t),
        Norm::Linf => group_linf_in_place(v, t),
    }
}

/// Prox of a penalty whose groups are pairwise disjoint: each block is
/// thresholded independently at `t·η_g`; coordinates outside every group pass
/// through.
pub fn prox_separable(u: &[f64], structure: &GroupStructure, t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    check_len(u, structure)?;
    if !structure.is_disjoint() {
        return Err(Error::Structure("separable prox needs pairwise disjoint groups".into()));
    }
    let order: Vec<usize> = (0..structure.len()).collect();
    let mut out = u.to_vec();
    apply_in_order(&mut out, structure, &order, t);
    Ok(out)
}

/// Prox of a tree-structured penalty, composing the group operators in
/// [`tree_order`].
pub fn prox_tree(u: &[f64], structure: &GroupStructure, t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    check_len(u, structure)?;
    let plan = ProxPlan::new(structure)?;
    let mut out = u.to_vec();
    plan.apply(&mut out, t);
    Ok(out)
}

fn apply_in_order(v: &mut [f64], structure: &GroupStructure, order: &[usize], t: f64) {
    let mut buf = Vec::new();
    let norm = structure.norm();
    for &k in order {
        let g = &structure.groups()[k];
        buf.clear();
        buf.extend(g.iter().map(|&j| v[j]));
        group_prox_in_place(&mut buf, t * structure.weights()[k], norm);
        for (&j, &x) in g.iter().zip(&buf) {
            v[j] = x;
        }
    }
}

/// A precomputed tree order for repeated prox evaluations on one structure.
#[derive(Debug, Clone)]
pub struct ProxPlan<'a> {
    structure: &'a GroupStructure,
    order: Vec<usize>,
    class: StructureClass,
}

impl<'a> ProxPlan<'a> {
    pub fn new(structure: &'a GroupStructure) -> Result<Self> {
        let class = structure.classify();
        if !class.is_tree_like() {
            return Err(Error::Structure(
                "groups overlap without nesting; no closed-form prox".into(),
            ));
        }
        let order = match class {
            StructureClass::Singletons | StructureClass::Partition => {
                (0..structure.len()).collect()
            }
            _ => tree_order(structure)?,
        };
        Ok(ProxPlan {
            structure,
            order,
            class,
        })
    }

    pub fn class(&self) -> StructureClass {
        self.class
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// In-place prox with threshold `t` (scaled per group by its weight).
    pub fn apply(&self, v: &mut [f64], t: f64) {
        apply_in_order(v, self.structure, &self.order, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{build_tree_groups, TreeSpec};
    use proptest::prelude::*;

    /// Sort-based reference for the ℓ1-ball projection.
    fn project_l1_sorted(u: &[f64], r: f64) -> Vec<f64> {
        let l1: f64 = u.iter().map(|x| x.abs()).sum();
        if l1 <= r {
            return u.to_vec();
        }
        let mut a: Vec<f64> = u.iter().map(|x| x.abs()).collect();
        a.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let mut cum = 0.0;
        let mut tau = 0.0;
        for (j, &x) in a.iter().enumerate() {
            cum += x;
            let cand = (cum - r) / (j + 1) as f64;
            if x - cand > 0.0 {
                tau = cand;
            }
        }
        u.iter()
            .map(|x| x.signum() * (x.abs() - tau).max(0.0))
            .collect()
    }

    fn norm2(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(prox_l1(&[2.0, -0.5, 0.0], 1.0).unwrap(), vec![1.0, 0.0, 0.0]);
        let u = [0.3, -7.0, 2.5];
        assert_eq!(prox_l1(&u, 0.0).unwrap(), u.to_vec());
        assert_eq!(prox_l1(&u, 7.0).unwrap(), vec![0.0; 3]);
        assert!(matches!(prox_l1(&u, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn group_l2_examples() {
        assert_eq!(prox_group_l2(&[3.0, 4.0], 5.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(prox_group_l2(&[3.0, 4.0], 2.5).unwrap(), vec![1.5, 2.0]);
        assert_eq!(prox_group_l2(&[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert!(prox_group_l2(&[1.0], -0.1).is_err());
    }

    #[test]
    fn l1_ball_examples() {
        assert_eq!(project_l1_ball(&[0.5, 0.3], 1.0).unwrap(), vec![0.5, 0.3]);
        assert_eq!(project_l1_ball(&[1.0, 1.0], 1.0).unwrap(), vec![0.5, 0.5]);
        // reference gives τ = 1
        assert_eq!(project_l1_sorted(&[3.0, -1.0, 0.2], 2.0), vec![2.0, 0.0, 0.0]);
        assert_eq!(project_l1_ball(&[3.0, -1.0, 0.2], 2.0).unwrap(), vec![2.0, 0.0, 0.0]);
        assert_eq!(project_l1_ball(&[3.0, -1.0], 0.0).unwrap(), vec![0.0, 0.0]);
        assert!(project_l1_ball(&[1.0], -1.0).is_err());
    }

    #[test]
    fn l1_ball_with_ties() {
        let u = [1.0, -1.0, 1.0, 1.0, 0.5];
        let got = project_l1_ball(&u, 2.0).unwrap();
        let want = project_l1_sorted(&u, 2.0);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn linf_examples() {
        assert_eq!(prox_group_linf(&[0.5, -0.2], 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_l1_sorted(&[3.0, -1.0], 2.0), vec![2.0, 0.0]);
        assert_eq!(prox_group_linf(&[3.0, -1.0], 2.0).unwrap(), vec![1.0, -1.0]);
        assert_eq!(prox_group_linf(&[3.0, -1.0], 0.0).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn separable_examples() {
        let s = GroupStructure::unweighted(3, vec![vec![0, 1], vec![2]], Norm::L2).unwrap();
        assert_eq!(
            prox_separable(&[3.0, 4.0, -2.0], &s, 2.5).unwrap(),
            vec![1.5, 2.0, 0.0]
        );
        assert_eq!(prox_separable(&[3.0, 4.0, -2.0], &s, 0.0).unwrap(), vec![3.0, 4.0, -2.0]);
        let single = GroupStructure::singletons(3).unwrap();
        let u = [1.5, -0.2, -3.0];
        assert_eq!(prox_separable(&u, &single, 0.7).unwrap(), prox_l1(&u, 0.7).unwrap());
        let partial = GroupStructure::unweighted(3, vec![vec![0]], Norm::L2).unwrap();
        assert_eq!(prox_separable(&u, &partial, 1.0).unwrap(), vec![0.5, -0.2, -3.0]);
        let overlap = GroupStructure::unweighted(3, vec![vec![0, 1], vec![1, 2]], Norm::L2).unwrap();
        assert!(matches!(prox_separable(&u, &overlap, 1.0), Err(Error::Structure(_))));
    }

    #[test]
    fn tree_single_group_reduces_to_group_operator() {
        let u = [0.7, -2.0, 1.1, 0.05];
        for norm in [Norm::L2, Norm::Linf] {
            let s = GroupStructure::unweighted(4, vec![(0..4).collect()], norm).unwrap();
            let got = prox_tree(&u, &s, 0.9).unwrap();
            let want = match norm {
                Norm::L2 => prox_group_l2(&u, 0.9).unwrap(),
                Norm::Linf => prox_group_linf(&u, 0.9).unwrap(),
            };
            assert_eq!(got, want);
        }
    }

    /// u = (1, 1), groups {2} ⊂ {1, 2}, t = 0.5. Inner step gives (1, 0.5);
    /// outer block shrink by 0.5/‖(1, 0.5)‖ yields (1 − 1/√5)(1, 0.5).
    /// Optimality: u − w = t(w/‖w‖ + (0, sign w₂)).
    #[test]
    fn tree_two_level_example_and_kkt() {
        let s = GroupStructure::unweighted(2, vec![vec![1], vec![0, 1]], Norm::L2).unwrap();
        let w = prox_tree(&[1.0, 1.0], &s, 0.5).unwrap();
        let c = 1.0 - 1.0 / 5f64.sqrt();
        assert!((w[0] - c).abs() < 1e-15 && (w[1] - 0.5 * c).abs() < 1e-15);
        assert!((w[0] - 0.5528).abs() < 1e-4 && (w[1] - 0.2764).abs() < 1e-4);
        let nw = norm2(&w);
        let r0 = 1.0 - w[0] - 0.5 * w[0] / nw;
        let r1 = 1.0 - w[1] - 0.5 * (w[1] / nw + w[1].signum());
        assert!(r0.abs() < 1e-14 && r1.abs() < 1e-14);
    }

    #[test]
    fn tree_disjoint_is_soft_threshold() {
        let s = GroupStructure::unweighted(2, vec![vec![0], vec![1]], Norm::L2).unwrap();
        assert_eq!(prox_tree(&[2.0, -0.3], &s, 0.5).unwrap(), prox_l1(&[2.0, -0.3], 0.5).unwrap());
        let overlap = GroupStructure::unweighted(3, vec![vec![0, 1], vec![1, 2]], Norm::L2).unwrap();
        assert!(matches!(prox_tree(&[0.0; 3], &overlap, 1.0), Err(Error::Structure(_))));
    }

    #[test]
    fn weights_scale_thresholds() {
        let s = GroupStructure::new(2, vec![vec![0], vec![1]], vec![1.0, 3.0], Norm::L2).unwrap();
        assert_eq!(prox_tree(&[2.0, 2.0], &s, 0.5).unwrap(), vec![1.5, 0.5]);
    }

    #[test]
    fn disjoint_order_does_not_matter() {
        let t = TreeSpec::complete(&[3, 2]).unwrap();
        let s = build_tree_groups(&t).unwrap().with_norm(Norm::Linf);
        let plan = ProxPlan::new(&s).unwrap();
        let u: Vec<f64> = (0..s.p()).map(|j| ((j * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let mut a = u.clone();
        plan.apply(&mut a, 0.4);
        // move sibling leaves (disjoint) to the opposite order
        let mut order = plan.order().to_vec();
        let leaves = order.iter().take_while(|&&k| s.groups()[k].len() == 1).count();
        order[..leaves].reverse();
        let mut b = u.clone();
        apply_in_order(&mut b, &s, &order, 0.4);
        assert_eq!(a, b);
    }

    fn random_tree(parent_seeds: &[usize]) -> GroupStructure {
        let mut parent = vec![None];
        for (v, &s) in parent_seeds.iter().enumerate() {
            parent.push(Some(s % (v + 1)));
        }
        build_tree_groups(&TreeSpec::new(parent).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn l1_ball_matches_sorted_reference(
            u in prop::collection::vec(-10.0f64..10.0, 1..200),
            frac in 0.0f64..1.5,
        ) {
            let l1: f64 = u.iter().map(|x| x.abs()).sum();
            let r = frac * l1;
            let got = project_l1_ball(&u, r).unwrap();
            let want = project_l1_sorted(&u, r);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let out_l1: f64 = got.iter().map(|x| x.abs()).sum();
            prop_assert!((out_l1 - r.min(l1)).abs() <= 1e-12 * (1.0 + l1));
            for (a, x) in got.iter().zip(&u) {
                prop_assert!(*a == 0.0 || a.signum() == x.signum());
            }
        }

        #[test]
        fn moreau_identity_linf(u in prop::collection::vec(-5.0f64..5.0, 1..50), t in 0.0f64..10.0) {
            let prox = prox_group_linf(&u, t).unwrap();
            let proj = project_l1_ball(&u, t).unwrap();
            let want = project_l1_sorted(&u, t);
            for j in 0..u.len() {
                prop_assert_eq!(prox[j] + proj[j], u[j]);
                prop_assert!((proj[j] - want[j]).abs() <= 1e-12);
            }
        }

        #[test]
        fn operators_are_nonexpansive(
            pair in (1usize..30).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            )),
            t in 0.0f64..3.0,
        ) {
            let (u, v) = pair;
            let d = |a: &[f64], b: &[f64]| norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
            let duv = d(&u, &v);
            let ops: [fn(&[f64], f64) -> Result<Vec<f64>>; 4] =
                [prox_l1, prox_group_l2, prox_group_linf, project_l1_ball];
            for op in ops {
                let pu = op(&u, t).unwrap();
                let pv = op(&v, t).unwrap();
                prop_assert!(d(&pu, &pv) <= duv + 1e-12);
            }
        }

        #[test]
        fn prox_of_zero_is_zero(n in 1usize..20, t in 0.0f64..3.0, seeds in prop::collection::vec(0usize..100, 0..20)) {
            let z = vec![0.0; n];
            prop_assert_eq!(prox_l1(&z, t).unwrap(), z.clone());
            prop_assert_eq!(prox_group_l2(&z, t).unwrap(), z.clone());
            prop_assert_eq!(prox_group_linf(&z, t).unwrap(), z.clone());
            let s = random_tree(&seeds);
            let zs = vec![0.0; s.p()];
            prop_assert_eq!(prox_tree(&zs, &s, t).unwrap(), zs);
        }

        #[test]
        fn tree_prox_beats_perturbations(
            seeds in prop::collection::vec(0usize..100, 0..19),
            raw in prop::collection::vec(-3.0f64..3.0, 20),
            t in 0.01f64..1.5,
            linf in any::<bool>(),
            dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 20), 50),
        ) {
            let s = random_tree(&seeds).with_norm(if linf { Norm::Linf } else { Norm::L2 });
            let u = &raw[..s.p()];
            let w = prox_tree(u, &s, t).unwrap();
            let obj = |x: &[f64]| {
                0.5 * x.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    + t * s.penalty_value(x).unwrap()
            };
            let best = obj(&w);
            for d in &dirs {
                let x: Vec<f64> = w.iter().zip(d).map(|(a, b)| a + 1e-2 * b / 5.0).collect();
                prop_assert!(best <= obj(&x) + 1e-10);
            }
        }

        #[test]
        fn tree_prox_on_partition_equals_separable(
            sizes in prop::collection::vec(1usize..5, 1..6),
            raw in prop::collection::vec(-3.0f64..3.0, 25),
            t in 0.0f64..2.0,
            linf in any::<bool>(),
        ) {
            let mut groups = Vec::new();
            let mut next = 0;
            for s in sizes {
                groups.push((next..next + s).collect::<Vec<_>>());
                next += s;
            }
            let norm = if linf { Norm::Linf } else { Norm::L2 };
            let s = GroupStructure::unweighted(next, groups, norm).unwrap();
            let u = &raw[..next];
            prop_assert_eq!(prox_tree(u, &s, t).unwrap(), prox_separable(u, &s, t).unwrap());
        }
    }
}
