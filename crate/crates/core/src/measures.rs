//! Empirical measures on the type/target/state space and the metrics the
//! convergence studies run on: quadratic transport distance (exact optimal
//! assignment for matched supports, sliced projection otherwise), the
//! sup-in-time flow metric, and the composite product-space metrics.

use crate::error::Error;
use crate::model::BankType;
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::Result;

/// A point of `E`: `(a, u, sigma, y, x)`.
pub type Atom<S> = [S; 5];

/// Uniform-weight empirical measure on `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure<S> {
    atoms: Vec<Atom<S>>,
}

impl<S: Scalar> EmpiricalMeasure<S> {
    pub fn new(atoms: Vec<Atom<S>>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::config("empirical measure needs at least one atom"));
        }
        Ok(EmpiricalMeasure { atoms })
    }

    /// Build `(1/N) Σ δ_(ξ_i, y_i, x_i)` from parallel slices.
    pub fn from_state(types: &[BankType<S>], targets: &[S], states: &[S]) -> Result<Self> {
        if types.len() != targets.len() || types.len() != states.len() {
            return Err(Error::dimension(format!(
                "empirical measure: {} types, {} targets, {} states",
                types.len(),
                targets.len(),
                states.len()
            )));
        }
        EmpiricalMeasure::new(
            types
                .iter()
                .zip(targets)
                .zip(states)
                .map(|((b, &y), &x)| [b.rate, b.supply, b.sigma, y, x])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Atom<S>] {
        &self.atoms
    }

    /// Mass-weighted mean of the state marginal.
    pub fn mean_state(&self) -> S {
        multiset_mean(self.atoms.iter().map(|a| a[4]))
    }

    /// `⟨μ, L⟩` for the quadratic distance `L(x, y) = |x - y|²`.
    pub fn mean_squared_gap(&self) -> S {
        multiset_mean(self.atoms.iter().map(|a| (a[4] - a[3]) * (a[4] - a[3])))
    }

    /// `⟨μ, φ⟩` evaluated on the state marginal.
    pub fn bracket(&self, phi: impl Fn(S) -> S) -> S {
        multiset_mean(self.atoms.iter().map(|a| phi(a[4])))
    }
}

fn sq_dist<S: Scalar>(a: &Atom<S>, b: &Atom<S>) -> S {
    let mut acc = S::zero();
    for i in 0..5 {
        let d = a[i] - b[i];
        acc = acc + d * d;
    }
    acc
}

/// Mean of a multiset of summands, independent of their enumeration order:
/// summands are sorted before accumulation so permuting the atoms of a
/// measure leaves every bracket value bit-identical.
pub fn multiset_mean<S: Scalar>(values: impl IntoIterator<Item = S>) -> S {
    let mut v: Vec<S> = values.into_iter().collect();
    debug_assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite summands"));
    let n = v.len();
    v.into_iter().fold(S::zero(), |acc, t| acc + t) / S::from_usize(n)
}

/// Result of a transport-distance computation. `exact` is false when the
/// sliced approximation was used, in which case the value is a lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Result<S> {
    pub value: S,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct W2Options {
    /// Largest matched support solved by exact assignment (cubic cost).
    pub exact_threshold: usize,
    /// Projection directions of the sliced fallback.
    pub slices: usize,
    pub slice_seed: u64,
}

impl Default for W2Options {
    fn default() -> Self {
        W2Options {
            exact_threshold: 256,
            slices: 64,
            slice_seed: 0x5A1CE,
        }
    }
}

/// Quadratic Wasserstein distance between two empirical measures.
///
/// Matched supports up to the threshold are solved exactly by the Hungarian
/// method on squared Euclidean costs; anything else falls back to the sliced
/// distance over a fixed seeded set of directions, flagged as approximate.
pub fn wasserstein2<S: Scalar>(
    mu: &EmpiricalMeasure<S>,
    nu: &EmpiricalMeasure<S>,
) -> Result<W2Result<S>> {
    wasserstein2_with(mu, nu, &W2Options::default())
}

pub fn wasserstein2_with<S: Scalar>(
    mu: &EmpiricalMeasure<S>,
    nu: &EmpiricalMeasure<S>,
    opts: &W2Options,
) -> Result<W2Result<S>> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::config("transport distance of an empty measure"));
    }
    let n = mu.len();
    if n == nu.len() && n <= opts.exact_threshold {
        let cost: Vec<Vec<S>> = mu
            .atoms
            .iter()
            .map(|a| nu.atoms.iter().map(|b| sq_dist(a, b)).collect())
            .collect();
        let (_, total) = hungarian(&cost);
        Ok(W2Result {
            value: (total / S::from_usize(n)).max(S::zero()).sqrt(),
            exact: true,
        })
    } else {
        let mut acc = S::zero();
        for dir in 0..opts.slices {
            let direction = slice_direction::<S>(opts.slice_seed, dir as u64);
            let mut pa: Vec<S> = mu
                .atoms
                .iter()
                .map(|a| project(a, &direction))
                .collect();
            let mut pb: Vec<S> = nu
                .atoms
                .iter()
                .map(|a| project(a, &direction))
                .collect();
            pa.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
            pb.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
            acc = acc + w2_squared_1d(&pa, &pb);
        }
        Ok(W2Result {
            value: (acc / S::from_usize(opts.slices)).sqrt(),
            exact: false,
        })
    }
}

fn project<S: Scalar>(a: &Atom<S>, dir: &[S; 5]) -> S {
    let mut acc = S::zero();
    for i in 0..5 {
        acc = acc + a[i] * dir[i];
    }
    acc
}

fn slice_direction<S: Scalar>(seed: u64, index: u64) -> [S; 5] {
    let mut stream = rng::stream_rng(seed, domain::SLICE, index, 0);
    loop {
        let mut v = [S::zero(); 5];
        let mut norm_sq = S::zero();
        for slot in v.iter_mut() {
            *slot = S::of(rng::next_normal(&mut stream));
            norm_sq = norm_sq + *slot * *slot;
        }
        if norm_sq > S::of(1e-12) {
            let norm = norm_sq.sqrt();
            for slot in v.iter_mut() {
                *slot = *slot / norm;
            }
            return v;
        }
    }
}

/// Exact 1-D squared quadratic transport between sorted uniform empirical
/// samples of sizes n and m, via the quantile coupling. Mass bookkeeping is
/// integral (units of 1/(n·m)) so the partition is exact.
fn w2_squared_1d<S: Scalar>(a_sorted: &[S], b_sorted: &[S]) -> S {
    let n = a_sorted.len() as u64;
    let m = b_sorted.len() as u64;
    let total = S::from_usize((n * m) as usize);
    let mut acc = S::zero();
    let (mut i, mut j) = (0usize, 0usize);
    let (mut rem_i, mut rem_j) = (m, n);
    while i < a_sorted.len() && j < b_sorted.len() {
        let w = rem_i.min(rem_j);
        let d = a_sorted[i] - b_sorted[j];
        acc = acc + S::from_usize(w as usize) * d * d;
        rem_i -= w;
        rem_j -= w;
        if rem_i == 0 {
            i += 1;
            rem_i = m;
        }
        if rem_j == 0 {
            j += 1;
            rem_j = n;
        }
    }
    acc / total
}

/// Minimum-cost perfect assignment on a square cost matrix (Jonker–Volgenant
/// shortest augmenting paths, cubic). Returns the column assigned to each
/// row and the total cost.
pub fn hungarian<S: Scalar>(cost: &[Vec<S>]) -> (Vec<usize>, S) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), S::zero());
    }
    let inf = S::infinity();
    let mut u = vec![S::zero(); n + 1];
    let mut v = vec![S::zero(); n + 1];
    let mut assigned_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] = u[assigned_row[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    let mut total = S::zero();
    for j in 1..=n {
        if assigned_row[j] > 0 {
            result[assigned_row[j] - 1] = j - 1;
            total = total + cost[assigned_row[j] - 1][j - 1];
        }
    }
    (result, total)
}

/// Time-indexed empirical measures with shared atom identity: the type and
/// target coordinates are constant, the state coordinate evolves.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasureFlow<S> {
    knots: Vec<S>,
    measures: Vec<EmpiricalMeasure<S>>,
}

impl<S: Scalar> EmpiricalMeasureFlow<S> {
    pub fn new(knots: Vec<S>, measures: Vec<EmpiricalMeasure<S>>) -> Result<Self> {
        if knots.len() != measures.len() || knots.is_empty() {
            return Err(Error::dimension(format!(
                "flow with {} knots and {} measures",
                knots.len(),
                measures.len()
            )));
        }
        let n = measures[0].len();
        if measures.iter().any(|m| m.len() != n) {
            return Err(Error::dimension(
                "flow atom count varies over time".to_string(),
            ));
        }
        Ok(EmpiricalMeasureFlow { knots, measures })
    }

    /// Flow from fixed types/targets and one state vector per knot.
    pub fn from_states(
        types: &[BankType<S>],
        targets: &[S],
        states_per_knot: &[Vec<S>],
        knots: &[S],
    ) -> Result<Self> {
        let measures = states_per_knot
            .iter()
            .map(|states| EmpiricalMeasure::from_state(types, targets, states))
            .collect::<Result<Vec<_>>>()?;
        EmpiricalMeasureFlow::new(knots.to_vec(), measures)
    }

    pub fn knots(&self) -> &[S] {
        &self.knots
    }

    pub fn at(&self, knot: usize) -> &EmpiricalMeasure<S> {
        &self.measures[knot]
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }
}

/// Sup-in-time transport distance between two flows on the same grid.
/// The result is exact only if every per-knot distance was.
pub fn flow_distance<S: Scalar>(
    rho: &EmpiricalMeasureFlow<S>,
    rho_hat: &EmpiricalMeasureFlow<S>,
) -> Result<W2Result<S>> {
    flow_distance_with(rho, rho_hat, &W2Options::default())
}

pub fn flow_distance_with<S: Scalar>(
    rho: &EmpiricalMeasureFlow<S>,
    rho_hat: &EmpiricalMeasureFlow<S>,
    opts: &W2Options,
) -> Result<W2Result<S>> {
    if rho.knots != rho_hat.knots {
        return Err(Error::dimension(
            "flow distance needs a common time grid".to_string(),
        ));
    }
    let mut sup = S::zero();
    let mut exact = true;
    for k in 0..rho.len() {
        let d = wasserstein2_with(rho.at(k), rho_hat.at(k), opts)?;
        sup = sup.max(d.value);
        exact = exact && d.exact;
    }
    Ok(W2Result { value: sup, exact })
}

/// A point of the product space: initial measure, control path, measure flow.
#[derive(Debug, Clone)]
pub struct HatSPoint<S> {
    pub init: EmpiricalMeasure<S>,
    /// Piecewise-constant control on the flow grid (one value per step).
    pub control: Vec<S>,
    pub flow: EmpiricalMeasureFlow<S>,
    pub dt: S,
}

/// A point of the canonical sequence space: per-bank initial data, the common
/// path, per-bank paths, and the control, all on one grid.
#[derive(Debug, Clone)]
pub struct CanonicalPoint<S> {
    /// `(x0, y)` per bank.
    pub initials: Vec<[S; 2]>,
    pub common: Vec<S>,
    pub idiosyncratic: Vec<Vec<S>>,
    pub control: Vec<S>,
    pub dt: S,
}

#[derive(Debug, Clone, Copy)]
pub struct CompositeMetrics<S> {
    pub d_hat_s: S,
    pub d_omega: S,
    pub d1: S,
    pub d2: S,
    pub d3: S,
    pub d4: S,
    /// Geometric bound on each truncated tail of d1 and d3.
    pub tail_bound: S,
}

fn sup_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |acc, (&x, &y)| acc.max((x - y).abs()))
}

fn l2_path_diff<S: Scalar>(a: &[S], b: &[S], dt: S) -> S {
    let acc = a
        .iter()
        .zip(b)
        .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y) * dt);
    acc.sqrt()
}

/// Both product-space metrics for a pair of composite points: the triple
/// metric `W₂ + ‖θ-θ̂‖_{L²} + d_S` and the canonical-space sum `d₁+d₂+d₃+d₄`
/// with the sequence components truncated at `truncation`.
pub fn composite_metrics<S: Scalar>(
    hat_a: &HatSPoint<S>,
    hat_b: &HatSPoint<S>,
    can_a: &CanonicalPoint<S>,
    can_b: &CanonicalPoint<S>,
    truncation: usize,
) -> Result<CompositeMetrics<S>> {
    if hat_a.control.len() != hat_b.control.len()
        || can_a.control.len() != can_b.control.len()
        || can_a.common.len() != can_b.common.len()
    {
        return Err(Error::dimension("composite metrics: grid mismatch".to_string()));
    }
    let w2_init = wasserstein2(&hat_a.init, &hat_b.init)?.value;
    let control_l2 = l2_path_diff(&hat_a.control, &hat_b.control, hat_a.dt);
    let d_s = flow_distance(&hat_a.flow, &hat_b.flow)?.value;
    let d_hat_s = w2_init + control_l2 + d_s;

    let half = S::of(0.5);
    let mut d1 = S::zero();
    let n1 = can_a.initials.len().min(can_b.initials.len()).min(truncation);
    let mut weight = S::one();
    for i in 0..n1 {
        weight = weight * half;
        let dx = can_a.initials[i][0] - can_b.initials[i][0];
        let dy = can_a.initials[i][1] - can_b.initials[i][1];
        let d = (dx * dx + dy * dy).sqrt();
        d1 = d1 + weight * d / (S::one() + d);
    }
    let d2 = sup_abs_diff(&can_a.common, &can_b.common);
    let mut d3 = S::zero();
    let n3 = can_a
        .idiosyncratic
        .len()
        .min(can_b.idiosyncratic.len())
        .min(truncation);
    weight = S::one();
    for i in 0..n3 {
        weight = weight * half;
        let d = sup_abs_diff(&can_a.idiosyncratic[i], &can_b.idiosyncratic[i]);
        d3 = d3 + weight * d / (S::one() + d);
    }
    let d4 = l2_path_diff(&can_a.control, &can_b.control, can_a.dt);
    let tail_bound = half.powi(truncation as i32);

    Ok(CompositeMetrics {
        d_hat_s,
        d_omega: d1 + d2 + d3 + d4,
        d1,
        d2,
        d3,
        d4,
        tail_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_uniform, stream_rng};

    fn atom(x: f64) -> Atom<f64> {
        [1.0, 1.0, 0.2, 0.0, x]
    }

    fn measure(xs: &[f64]) -> EmpiricalMeasure<f64> {
        EmpiricalMeasure::new(xs.iter().map(|&x| atom(x)).collect()).unwrap()
    }

    fn random_measure(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> EmpiricalMeasure<f64> {
        EmpiricalMeasure::new(
            (0..n)
                .map(|_| {
                    [
                        next_uniform(rng),
                        next_uniform(rng),
                        next_uniform(rng),
                        2.0 * next_uniform(rng) - 1.0,
                        4.0 * next_uniform(rng) - 2.0,
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn brute_force_w2(mu: &EmpiricalMeasure<f64>, nu: &EmpiricalMeasure<f64>) -> f64 {
        let n = mu.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        // Heap's algorithm over all permutations.
        #[allow(clippy::manual_is_multiple_of)]
        fn heaps(k: usize, perm: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
            if k <= 1 {
                visit(perm);
                return;
            }
            for i in 0..k - 1 {
                heaps(k - 1, perm, visit);
                if k % 2 == 0 {
                    perm.swap(i, k - 1);
                } else {
                    perm.swap(0, k - 1);
                }
            }
            heaps(k - 1, perm, visit);
        }
        let atoms_a = mu.atoms().to_vec();
        let atoms_b = nu.atoms().to_vec();
        heaps(n, &mut perm, &mut |p: &[usize]| {
            let total: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| sq_dist(&atoms_a[i], &atoms_b[j]))
                .sum();
            best = best.min(total);
        });
        (best / n as f64).sqrt()
    }

    #[test]
    fn empirical_measure_basics() {
        let m = measure(&[1.0]);
        assert_eq!(m.len(), 1);
        let m = measure(&[0.0, 1.0, 5.0]);
        assert_eq!(m.mean_state(), 2.0);
        assert!(EmpiricalMeasure::<f64>::new(vec![]).is_err());
        assert!(EmpiricalMeasure::from_state(
            &[BankType::new(1.0, 1.0, 0.1)],
            &[0.0, 1.0],
            &[0.0]
        )
        .is_err());
    }

    #[test]
    fn w2_identity_and_point_masses() {
        let m = measure(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein2(&m, &m).unwrap().value, 0.0);
        let p = measure(&[1.0]);
        let q = measure(&[4.0]);
        let d = wasserstein2(&p, &q).unwrap();
        assert!(d.exact);
        assert!((d.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn w2_two_atom_example() {
        // {0, 2} vs {1, 3}: the monotone matching costs (1+1)/2, so the
        // distance is 1.
        let d = wasserstein2(&measure(&[0.0, 2.0]), &measure(&[1.0, 3.0])).unwrap();
        assert!(d.exact);
        assert!((d.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force_on_small_instances() {
        let mut rng = stream_rng(3, 50, 0, 0);
        for trial in 0..200 {
            let n = 1 + trial % 7;
            let mu = random_measure(&mut rng, n);
            let nu = random_measure(&mut rng, n);
            let exact = wasserstein2(&mu, &nu).unwrap();
            assert!(exact.exact);
            let brute = brute_force_w2(&mu, &nu);
            assert!(
                (exact.value - brute).abs() < 1e-10,
                "n={n}: hungarian {} vs brute {brute}",
                exact.value
            );
        }
    }

    #[test]
    fn w2_is_a_metric_on_random_instances() {
        let mut rng = stream_rng(9, 51, 0, 0);
        for trial in 0..100 {
            let n = 2 + trial % 5;
            let a = random_measure(&mut rng, n);
            let b = random_measure(&mut rng, n);
            let c = random_measure(&mut rng, n);
            let dab = wasserstein2(&a, &b).unwrap().value;
            let dba = wasserstein2(&b, &a).unwrap().value;
            let dac = wasserstein2(&a, &c).unwrap().value;
            let dcb = wasserstein2(&c, &b).unwrap().value;
            assert!((dab - dba).abs() < 1e-12, "symmetry");
            assert!(dab <= dac + dcb + 1e-12, "triangle inequality");
        }
    }

    #[test]
    fn sliced_lower_bounds_exact() {
        let mut rng = stream_rng(4, 52, 0, 0);
        for trial in 0..50 {
            let n = 2 + trial % 6;
            let a = random_measure(&mut rng, n);
            let b = random_measure(&mut rng, n);
            let exact = wasserstein2(&a, &b).unwrap().value;
            let sliced = wasserstein2_with(
                &a,
                &b,
                &W2Options {
                    exact_threshold: 0,
                    ..W2Options::default()
                },
            )
            .unwrap();
            assert!(!sliced.exact);
            assert!(
                sliced.value <= exact + 1e-12,
                "sliced {} vs exact {exact}",
                sliced.value
            );
        }
    }

    #[test]
    fn sliced_handles_unequal_supports() {
        let a = measure(&[0.0, 1.0, 2.0]);
        let b = measure(&[0.5, 1.5]);
        let d = wasserstein2(&a, &b).unwrap();
        assert!(!d.exact);
        assert!(d.value > 0.0);
        let same = wasserstein2(&a, &a).unwrap();
        assert!(same.exact);
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn one_dimensional_transport_is_exact_for_quantile_coupling() {
        // Uniform masses 1/2 vs 1/3: optimal coupling computable by hand.
        let a = [0.0f64, 1.0];
        let b = [0.0f64, 0.5, 1.0];
        // Pairs: (0,0) w=1/3, (0,0.5) w=1/6, (1,0.5) w=1/6, (1,1) w=1/3.
        let expect = (1.0 / 6.0) * 0.25 + (1.0 / 6.0) * 0.25;
        assert!((w2_squared_1d(&a, &b) - expect).abs() < 1e-15);
    }

    #[test]
    fn flow_distance_examples() {
        let knots = vec![0.0, 0.5, 1.0];
        let flow_a = EmpiricalMeasureFlow::new(
            knots.clone(),
            vec![
                measure(&[0.0, 1.0]),
                measure(&[0.1, 1.1]),
                measure(&[0.2, 1.2]),
            ],
        )
        .unwrap();
        assert_eq!(flow_distance(&flow_a, &flow_a).unwrap().value, 0.0);

        // Differ only at the final knot.
        let flow_b = EmpiricalMeasureFlow::new(
            knots.clone(),
            vec![
                measure(&[0.0, 1.0]),
                measure(&[0.1, 1.1]),
                measure(&[1.2, 2.2]),
            ],
        )
        .unwrap();
        let final_only = wasserstein2(flow_a.at(2), flow_b.at(2)).unwrap().value;
        let d = flow_distance(&flow_a, &flow_b).unwrap().value;
        assert!((d - final_only).abs() < 1e-12);

        let other_grid = EmpiricalMeasureFlow::new(
            vec![0.0, 0.4, 1.0],
            vec![
                measure(&[0.0, 1.0]),
                measure(&[0.1, 1.1]),
                measure(&[0.2, 1.2]),
            ],
        )
        .unwrap();
        assert!(flow_distance(&flow_a, &other_grid).is_err());
    }

    #[test]
    fn flow_distance_triangle_inequality_on_random_triples() {
        let mut rng = stream_rng(6, 53, 0, 0);
        let knots = vec![0.0, 0.5, 1.0];
        let mut random_flow = |n: usize| {
            EmpiricalMeasureFlow::new(
                knots.clone(),
                (0..3).map(|_| random_measure(&mut rng, n)).collect(),
            )
            .unwrap()
        };
        for trial in 0..100 {
            let n = 2 + trial % 4;
            let a = random_flow(n);
            let b = random_flow(n);
            let c = random_flow(n);
            let dab = flow_distance(&a, &b).unwrap().value;
            let dac = flow_distance(&a, &c).unwrap().value;
            let dcb = flow_distance(&c, &b).unwrap().value;
            assert!(dab <= dac + dcb + 1e-12);
        }
    }

    fn canonical(initials: Vec<[f64; 2]>, control: Vec<f64>) -> CanonicalPoint<f64> {
        CanonicalPoint {
            initials,
            common: vec![0.0; 5],
            idiosyncratic: vec![vec![0.0; 5]; 2],
            control,
            dt: 0.25,
        }
    }

    fn hat_point(xs: &[f64], control: Vec<f64>) -> HatSPoint<f64> {
        let m = measure(xs);
        HatSPoint {
            init: m.clone(),
            control,
            flow: EmpiricalMeasureFlow::new(vec![0.0, 1.0], vec![m.clone(), m]).unwrap(),
            dt: 0.25,
        }
    }

    #[test]
    fn composite_metrics_identical_points_vanish() {
        let hat = hat_point(&[0.0, 1.0], vec![0.0; 4]);
        let can = canonical(vec![[1.0, 0.0], [0.5, 0.0]], vec![0.0; 4]);
        let m = composite_metrics(&hat, &hat, &can, &can, 16).unwrap();
        assert_eq!(m.d_hat_s, 0.0);
        assert_eq!(m.d_omega, 0.0);
        assert_eq!(m.tail_bound, 2.0f64.powi(-16));
    }

    #[test]
    fn composite_d1_single_coordinate_perturbation() {
        let hat = hat_point(&[0.0], vec![0.0; 4]);
        let base = canonical(vec![[1.0, 0.0], [0.5, 0.0], [0.2, 0.1]], vec![0.0; 4]);
        let delta = 0.7;
        let mut moved = base.clone();
        moved.initials[1][0] += delta;
        let m = composite_metrics(&hat, &hat, &base, &moved, 16).unwrap();
        let expect = 0.25 * delta / (1.0 + delta);
        assert!((m.d1 - expect).abs() < 1e-15, "d1 {}", m.d1);
        assert_eq!(m.d2, 0.0);
        assert_eq!(m.d3, 0.0);
        assert_eq!(m.d4, 0.0);
    }

    #[test]
    fn composite_d4_is_control_l2_distance() {
        // θ ≡ 0 vs θ ≡ 1 on [0,1]: the squared distance integrates to 1.
        let hat_a = hat_point(&[0.0], vec![0.0; 4]);
        let hat_b = hat_point(&[0.0], vec![1.0; 4]);
        let can_a = canonical(vec![[0.0, 0.0]], vec![0.0; 4]);
        let can_b = canonical(vec![[0.0, 0.0]], vec![1.0; 4]);
        let m = composite_metrics(&hat_a, &hat_b, &can_a, &can_b, 8).unwrap();
        assert!((m.d4 - 1.0).abs() < 1e-15);
        // d_hat_s picks up the same control distance.
        assert!((m.d_hat_s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncation_tail_bound_honored() {
        // The dropped tail of d1/d3 is at most sum_{i>k} 2^-i = 2^-k.
        let hat = hat_point(&[0.0], vec![0.0; 4]);
        let long: Vec<[f64; 2]> = (0..24).map(|i| [i as f64, -(i as f64)]).collect();
        let zeros = vec![[0.0, 0.0]; 24];
        let full = composite_metrics(
            &hat,
            &hat,
            &canonical(long.clone(), vec![0.0; 4]),
            &canonical(zeros.clone(), vec![0.0; 4]),
            24,
        )
        .unwrap();
        for trunc in [4usize, 8, 12] {
            let truncated = composite_metrics(
                &hat,
                &hat,
                &canonical(long.clone(), vec![0.0; 4]),
                &canonical(zeros.clone(), vec![0.0; 4]),
                trunc,
            )
            .unwrap();
            let dropped = full.d1 - truncated.d1;
            assert!(dropped >= 0.0);
            assert!(
                dropped <= truncated.tail_bound,
                "dropped {dropped} vs bound {}",
                truncated.tail_bound
            );
        }
    }
}
