use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipf::{self, IpfControl, Margin};
use crate::model::{
    check_params, class_conditional, interaction_masks, shared_block_distribution, BlockKind,
    Layout, ModelSpec, ParameterSet, EPSILON,
};
use crate::scalar::Scalar;
use crate::CaptureCounts;

/// Expected complete-data counts, `counts[class][profile]`. Row entries at
/// profile 0 are the imputed units missed by every register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedTable<T> {
    pub counts: Vec<Vec<T>>,
}

impl<T: Scalar> ExpectedTable<T> {
    pub fn class_totals(&self) -> Vec<T> {
        self.counts.iter().map(|row| row.iter().copied().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStep<T> {
    /// `posteriors[profile][class]`, every profile index including the
    /// unobserved one (whose row is the class split of the missed units).
    pub posteriors: Vec<Vec<T>>,
    pub expected: ExpectedTable<T>,
}

pub(crate) fn dense_counts<T: Scalar>(counts: &CaptureCounts) -> Vec<T> {
    counts.dense().iter().map(|&c| T::from_count(c)).collect()
}

/// Capture probability as the sum of the observable cells; `1 - P0` loses
/// every digit when capture is rare.
fn seen_mass<T: Scalar>(probs: &[T]) -> T {
    probs[1..].iter().copied().sum::<T>().max(T::min_positive_value())
}

/// Capture-conditional log-likelihood from mixture cell probabilities.
pub(crate) fn loglik_from_probs<T: Scalar>(probs: &[T], counts: &[T]) -> T {
    let eps = T::lit(EPSILON);
    let seen = seen_mass(probs);
    let mut ll = T::zero();
    for (&c, &p) in counts.iter().zip(probs).skip(1) {
        if c > T::zero() {
            ll += c * (p / seen).clamp_to(eps, T::one()).ln();
        }
    }
    ll
}

pub(crate) fn e_step_dense<T: Scalar>(layout: &Layout, params: &ParameterSet<T>, counts: &[T]) -> EStep<T> {
    let l = layout.num_classes;
    let cond = class_conditional(layout, params);
    let n_profiles = layout.num_profiles();
    let n: T = counts.iter().copied().sum();
    let mut posteriors = vec![vec![T::zero(); l]; n_profiles];
    let mut expected = vec![vec![T::zero(); n_profiles]; l];
    let mut totals = vec![T::zero(); n_profiles];
    for (profile, post) in posteriors.iter_mut().enumerate() {
        let mut total = T::zero();
        for x in 0..l {
            post[x] = params.class_weights[x] * cond[x][profile];
            total += post[x];
        }
        if total > T::zero() {
            post.iter_mut().for_each(|v| *v /= total);
        } else {
            post.copy_from_slice(&params.class_weights);
        }
        totals[profile] = total;
        if profile > 0 {
            for x in 0..l {
                expected[x][profile] = counts[profile] * post[x];
            }
        }
    }
    // missed units: n * pi_x q_x / (1 - P0)
    let seen = seen_mass(&totals);
    for x in 0..l {
        expected[x][0] = n * params.class_weights[x] * cond[x][0] / seen;
    }
    EStep {
        posteriors,
        expected: ExpectedTable { counts: expected },
    }
}

/// Posterior class membership for every profile and the expected complete
/// table, with missed units imputed per class.
pub fn e_step<T: Scalar>(
    spec: &ModelSpec,
    params: &ParameterSet<T>,
    counts: &CaptureCounts,
) -> Result<EStep<T>> {
    check_params(spec, params)?;
    check_counts(spec, counts)?;
    let layout = Layout::new(spec)?;
    Ok(e_step_dense(&layout, params, &dense_counts(counts)))
}

pub(crate) fn check_counts(spec: &ModelSpec, counts: &CaptureCounts) -> Result<()> {
    if counts.num_registers() != spec.num_registers() {
        return Err(Error::Dimension(format!(
            "counts cover {} registers, spec has {}",
            counts.num_registers(),
            spec.num_registers()
        )));
    }
    Ok(())
}

/// Collapse one class's complete table onto each block: `[block][cell]`.
fn block_tables<T: Scalar>(layout: &Layout, row: &[T]) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = layout
        .blocks
        .iter()
        .map(|b| vec![T::zero(); b.num_cells()])
        .collect();
    for (profile, &v) in row.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        for (b, table) in out.iter_mut().enumerate() {
            table[layout.cell(profile, b)] += v;
        }
    }
    out
}

/// Sum of `lambda` over interaction subsets contained in `cell`.
fn interaction_seed<T: Scalar>(m: usize, lambdas: &[T]) -> Vec<T> {
    let masks = interaction_masks(m);
    (0..1usize << m)
        .map(|cell| {
            masks
                .iter()
                .zip(lambdas)
                .filter(|(&mask, _)| cell & mask == mask)
                .fold(T::zero(), |acc, (_, &v)| acc + v)
                .exp()
        })
        .collect()
}

fn one_way_margins<T: Scalar>(m: usize, table: &[T], offset_classes: Option<usize>) -> Vec<Margin<T>> {
    // with `offset_classes = Some(l)` the table is (class x cell), class-major
    let cells = 1usize << m;
    let classes = offset_classes.unwrap_or(1);
    (0..m)
        .map(|j| {
            let map: Vec<usize> = (0..classes * cells)
                .map(|i| {
                    let (x, cell) = (i / cells, i % cells);
                    x * 2 + ((cell >> (m - 1 - j)) & 1)
                })
                .collect();
            let mut target = vec![T::zero(); classes * 2];
            for (&t, &v) in map.iter().zip(table) {
                target[t] += v;
            }
            Margin { map, target }
        })
        .collect()
}

/// Main-effect probabilities of a block table in the shared parameterization.
/// The odds of register `j` come from the best-populated pair of cells that
/// differ only in `j`, corrected for the interactions of the upper cell; a
/// register with no such pair sits on the boundary.
fn main_effects<T: Scalar>(m: usize, table: &[T], lambdas: &[T]) -> Vec<T> {
    let masks = interaction_masks(m);
    let total: T = table.iter().copied().sum();
    (0..m)
        .map(|j| {
            let bit = 1usize << (m - 1 - j);
            let mut best: Option<(T, usize)> = None;
            for low in (0..table.len()).filter(|c| c & bit == 0) {
                let weight = table[low].min(table[low | bit]);
                if weight > T::zero() && best.is_none_or(|(w, _)| weight > w) {
                    best = Some((weight, low));
                }
            }
            match best {
                Some((_, low)) => {
                    let high = low | bit;
                    let shift = masks
                        .iter()
                        .zip(lambdas)
                        .filter(|(&mask, _)| mask & bit != 0 && high & mask == mask)
                        .fold(T::zero(), |acc, (_, &v)| acc + v);
                    let odds = table[high] / table[low] * (-shift).exp();
                    if odds.is_infinite() {
                        T::one()
                    } else {
                        odds / (T::one() + odds)
                    }
                }
                None if total > T::zero() => {
                    let upper: T = (0..table.len()).filter(|c| c & bit != 0).map(|c| table[c]).sum();
                    if upper + upper > total {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                None => T::lit(0.5),
            }
        })
        .collect()
}

/// Möbius inversion of `log table` onto the interaction subsets.
fn interactions<T: Scalar>(m: usize, table: &[T], floor: T) -> Vec<T> {
    let logs: Vec<T> = table.iter().map(|&v| v.max(floor).ln()).collect();
    interaction_masks(m)
        .into_iter()
        .map(|mask| {
            let size = (mask as u32).count_ones();
            let mut acc = T::zero();
            // all subsets of mask
            let mut sub = mask;
            loop {
                let sign = if (size - (sub as u32).count_ones()) % 2 == 0 { T::one() } else { -T::one() };
                acc += sign * logs[sub];
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & mask;
            }
            acc
        })
        .collect()
}

/// Parameters of one class fitted to its complete table.
#[derive(Debug, Clone)]
pub(crate) struct ClassFit<T> {
    /// `(register, probability)` for every register of the class.
    probs: Vec<(usize, T)>,
    /// `(class-specific term, table)`.
    tables: Vec<(usize, Vec<T>)>,
    /// Log probability of being missed by every register, accumulated from
    /// per-block capture probabilities so that `1 - miss` keeps its precision
    /// when the miss probability is close to one.
    log_miss: T,
}

impl<T: Scalar> ClassFit<T> {
    fn seen(&self) -> T {
        -self.log_miss.exp_m1()
    }

    #[cfg(test)]
    fn miss(&self) -> T {
        self.log_miss.exp()
    }
}

impl<T: Scalar> ClassFit<T> {
    fn write(self, params: &mut ParameterSet<T>, x: usize) {
        for (r, p) in self.probs {
            params.inclusion_probs[x][r] = p;
        }
        for (t, table) in self.tables {
            params.block_tables[t][x] = table;
        }
    }
}

/// Closed-form updates for one class given its block tables, with shared
/// interactions held at `lambdas`.
fn class_update<T: Scalar>(
    layout: &Layout,
    tables: &[Vec<T>],
    lambdas: &[Vec<T>],
    ipf_control: IpfControl,
) -> Result<ClassFit<T>> {
    let mut fit = ClassFit {
        probs: Vec::with_capacity(layout.num_registers),
        tables: Vec::new(),
        log_miss: T::zero(),
    };
    for (block, bt) in layout.blocks.iter().zip(tables) {
        let total: T = bt.iter().copied().sum();
        match block.kind {
            BlockKind::Single => {
                let p = if total > T::zero() { bt[1] / total } else { T::lit(0.5) };
                fit.probs.push((block.registers[0], p));
                fit.log_miss += (-p).ln_1p();
            }
            BlockKind::ClassSpecific { table } => {
                let t: Vec<T> = if total > T::zero() {
                    bt.iter().map(|&v| v / total).collect()
                } else {
                    vec![T::one() / T::from_usize(bt.len()).unwrap(); bt.len()]
                };
                for (j, &r) in block.registers.iter().enumerate() {
                    let margin = t
                        .iter()
                        .enumerate()
                        .filter(|(cell, _)| block.bit(*cell, j))
                        .fold(T::zero(), |a, (_, &v)| a + v);
                    fit.probs.push((r, margin));
                }
                let seen: T = t[1..].iter().copied().sum();
                fit.log_miss += (-seen).ln_1p();
                fit.tables.push((table, t));
            }
            BlockKind::Shared { shared } => {
                let m = block.size();
                let lam = &lambdas[shared];
                let probs = if total > T::zero() {
                    let mut seed = interaction_seed(m, lam);
                    let margins = one_way_margins(m, bt, None);
                    ipf::fit(&mut seed, &margins, ipf_control)?;
                    main_effects(m, &seed, lam)
                } else {
                    vec![T::lit(0.5); m]
                };
                let seen: T = shared_block_distribution(&probs, lam)[1..].iter().copied().sum();
                fit.log_miss += (-seen).ln_1p();
                fit.probs.extend(block.registers.iter().copied().zip(probs));
            }
        }
    }
    Ok(fit)
}

fn empty_params<T: Scalar>(template: &ParameterSet<T>) -> ParameterSet<T> {
    let mut p = template.clone();
    p.class_weights.iter_mut().for_each(|v| *v = T::zero());
    p
}

/// Maximize the expected complete-data likelihood.
///
/// Independent registers and class-specific tables have closed-form
/// updates. Each shared term is fitted jointly across classes by IPF on its
/// (class x block cell) table, matching every register-by-class margin and
/// the block's table pooled over classes.
pub fn m_step<T: Scalar>(
    spec: &ModelSpec,
    expected: &ExpectedTable<T>,
    ipf_control: IpfControl,
) -> Result<ParameterSet<T>> {
    let layout = Layout::new(spec)?;
    if expected.counts.len() != spec.num_classes
        || expected.counts.iter().any(|r| r.len() != layout.num_profiles())
    {
        return Err(Error::Dimension(format!(
            "expected table must be {}x{}",
            spec.num_classes,
            layout.num_profiles()
        )));
    }
    if expected.counts.iter().flatten().any(|&v| !(v >= T::zero())) {
        return Err(Error::Malformed("expected table has negative entries".into()));
    }
    let template = ParameterSet::from_independence(
        spec,
        vec![T::zero(); spec.num_classes],
        vec![vec![T::lit(0.5); spec.num_registers()]; spec.num_classes],
    )?;
    m_step_dense(&layout, &template, expected, ipf_control)
}

pub(crate) fn m_step_dense<T: Scalar>(
    layout: &Layout,
    template: &ParameterSet<T>,
    expected: &ExpectedTable<T>,
    ipf_control: IpfControl,
) -> Result<ParameterSet<T>> {
    let l = layout.num_classes;
    let totals = expected.class_totals();
    let grand: T = totals.iter().copied().sum();
    if !(grand > T::zero()) {
        return Err(Error::EmptyCounts);
    }
    let mut params = empty_params(template);
    for x in 0..l {
        params.class_weights[x] = totals[x] / grand;
    }
    let class_tables: Vec<Vec<Vec<T>>> = expected.counts.iter().map(|row| block_tables(layout, row)).collect();

    let lambdas = template.shared_interactions.clone();
    for (x, tables) in class_tables.iter().enumerate() {
        class_update(layout, tables, &lambdas, ipf_control)?.write(&mut params, x);
    }

    for (s, &b) in layout.shared_blocks.iter().enumerate() {
        let block = &layout.blocks[b];
        let m = block.size();
        let cells = block.num_cells();
        let observed: Vec<T> = class_tables.iter().flat_map(|t| t[b].iter().copied()).collect();
        let mut margins = one_way_margins(m, &observed, Some(l));
        let mut pooled = vec![T::zero(); cells];
        for (i, &v) in observed.iter().enumerate() {
            pooled[i % cells] += v;
        }
        margins.push(Margin {
            map: (0..l * cells).map(|i| i % cells).collect(),
            target: pooled,
        });
        // Warm start from the current parameters: every IPF cycle then raises
        // the expected complete-data likelihood, so a truncated fit is still
        // an ascent step.
        let mut table: Vec<T> = (0..l)
            .flat_map(|x| {
                let probs: Vec<T> = block
                    .registers
                    .iter()
                    .map(|&r| template.inclusion_probs[x][r].clamp_to(T::lit(EPSILON), T::one() - T::lit(EPSILON)))
                    .collect();
                shared_block_distribution(&probs, &template.shared_interactions[s])
            })
            .collect();
        match ipf::fit(&mut table, &margins, ipf_control) {
            Ok(_) | Err(Error::IpfNonConvergence { .. }) => {}
            Err(e) => return Err(e),
        }

        // The fitted table has the same interactions in every class; classes
        // are weighted by the inverse variance of their log-linear contrasts
        // so that nearly empty cells cannot spoil the estimate.
        let mut lambda = vec![T::zero(); interaction_masks(m).len()];
        let mut weight = T::zero();
        let mut fallback = vec![T::zero(); lambda.len()];
        let mut fallback_weight = T::zero();
        for x in 0..l {
            let sub = &table[x * cells..(x + 1) * cells];
            if !(totals[x] > T::zero()) {
                continue;
            }
            let precision = T::one() / sub.iter().map(|&v| T::one() / v).sum::<T>();
            if sub.iter().all(|&v| v > T::zero()) && precision.is_finite() && precision > T::zero() {
                for (acc, v) in lambda.iter_mut().zip(interactions(m, sub, T::min_positive_value())) {
                    *acc += precision * v;
                }
                weight += precision;
            }
            let class_total: T = sub.iter().copied().sum();
            let floor = T::lit(EPSILON) * class_total.max(T::min_positive_value());
            for (acc, v) in fallback.iter_mut().zip(interactions(m, sub, floor)) {
                *acc += totals[x] * v;
            }
            fallback_weight += totals[x];
        }
        if weight > T::zero() {
            lambda.iter_mut().for_each(|v| *v /= weight);
        } else if fallback_weight > T::zero() {
            lambda = fallback.into_iter().map(|v| v / fallback_weight).collect();
        }
        for x in 0..l {
            if totals[x] > T::zero() {
                let sub = &table[x * cells..(x + 1) * cells];
                for (&r, p) in block.registers.iter().zip(main_effects(m, sub, &lambda)) {
                    params.inclusion_probs[x][r] = p;
                }
            }
        }
        params.shared_interactions[s] = lambda;
    }
    params.sync_block_margins(layout);
    Ok(params)
}

/// Upper bound on a class size relative to its observed mass.
const MAX_INFLATION: f64 = 1e12;

/// Fit one class to its observed (posterior-weighted) profile counts by
/// maximizing the capture-conditional likelihood of that class alone, with
/// shared interactions held fixed.
///
/// The missed-unit count `N - m` is solved for directly: at the optimum the
/// class size satisfies `N = m / (1 - q(N))`, where `q(N)` is the miss
/// probability of the complete-data fit with `N - m` missed units. Returns
/// the class size and its parameters; the size is capped when the
/// likelihood keeps increasing towards a class of unbounded size.
pub(crate) fn solve_class<T: Scalar>(
    layout: &Layout,
    observed_row: &[T],
    lambdas: &[Vec<T>],
    ipf_control: IpfControl,
) -> Result<Option<(T, ClassFit<T>)>> {
    let mass: T = observed_row.iter().skip(1).copied().sum();
    if !(mass > T::lit(EPSILON)) {
        return Ok(None);
    }
    let base = block_tables(layout, observed_row);
    let eval = |size: T| -> Result<(T, ClassFit<T>)> {
        let missed = (size - mass).max(T::zero());
        let tables: Vec<Vec<T>> = base
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t[0] += missed;
                t
            })
            .collect();
        let fit = class_update(layout, &tables, lambdas, ipf_control)?;
        let seen = fit.seen();
        let gap = if seen > T::zero() { mass / seen - size } else { T::infinity() };
        Ok((gap, fit))
    };

    let (gap_lo, fit_lo) = eval(mass)?;
    if gap_lo <= T::zero() {
        return Ok(Some((mass, fit_lo)));
    }
    let cap = mass * T::lit(MAX_INFLATION);
    let mut lo = mass;
    let mut hi = mass * T::lit(2.0);
    loop {
        let (gap, fit) = eval(hi)?;
        if gap <= T::zero() {
            break;
        }
        lo = hi;
        if hi >= cap {
            return Ok(Some((hi, fit)));
        }
        hi = (hi * T::lit(2.0)).min(cap);
    }
    let rel = T::epsilon() * T::lit(4.0);
    for _ in 0..400 {
        if hi - lo <= rel * hi {
            break;
        }
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid)?.0 > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let size = lo + (hi - lo) / T::lit(2.0);
    let (_, fit) = eval(size)?;
    Ok(Some((size, fit)))
}

/// One iteration that treats class membership of the observed units as the
/// only missing data: the E-step posteriors fix each class's observed mass,
/// and each class (with its missed units) is then fitted exactly.
pub(crate) fn class_solve_step<T: Scalar>(
    layout: &Layout,
    params: &ParameterSet<T>,
    estep: &EStep<T>,
    ipf_control: IpfControl,
) -> Result<ParameterSet<T>> {
    let l = layout.num_classes;
    let mut next = params.clone();
    let mut sizes = vec![T::zero(); l];
    for x in 0..l {
        let mut row = estep.expected.counts[x].clone();
        row[0] = T::zero();
        if let Some((size, fit)) = solve_class(layout, &row, &params.shared_interactions, ipf_control)? {
            sizes[x] = size;
            fit.write(&mut next, x);
        }
    }
    let total: T = sizes.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::EmptyCounts);
    }
    for x in 0..l {
        next.class_weights[x] = sizes[x] / total;
    }
    next.sync_block_margins(layout);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{full_distribution, DependenceTerm};

    fn scenario1(spec: &ModelSpec) -> ParameterSet<f64> {
        ParameterSet::from_independence(
            spec,
            vec![0.4, 0.6],
            vec![vec![0.25, 0.20, 0.21, 0.29], vec![0.70, 0.82, 0.86, 0.83]],
        )
        .unwrap()
    }

    fn counts(pairs: &[(&str, u64)]) -> CaptureCounts {
        CaptureCounts::from_pairs(pairs[0].0.len(), pairs.iter().copied()).unwrap()
    }

    #[test]
    fn posterior_of_full_capture_in_scenario1() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let params = scenario1(&spec);
        let es = e_step(&spec, &params, &counts(&[("1111", 10)])).unwrap();
        let post = &es.posteriors[0b1111];
        // 0.6*0.4097212 / 0.24705072
        assert!((post[1] - 0.24583272 / 0.24705072).abs() < 1e-12);
        assert!((post[1] - 0.99507).abs() < 1e-5);
        for row in &es.posteriors {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn imputed_missing_rows_follow_params() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let params = scenario1(&spec);
        let data = counts(&[("1111", 300), ("1000", 200), ("0110", 100)]);
        let es = e_step(&spec, &params, &data).unwrap();
        let p0 = 0.13538712;
        let expected_total = 600.0 / (1.0 - p0);
        assert!((es.expected.counts[0][0] - expected_total * 0.4 * 0.33654).abs() < 1e-9);
        assert!((es.expected.counts[1][0] - expected_total * 0.6 * 0.0012852).abs() < 1e-9);
        let observed: f64 = es.expected.counts.iter().flat_map(|r| r[1..].iter()).sum();
        assert!((observed - 600.0).abs() < 1e-9);
    }

    #[test]
    fn single_class_posteriors_are_one() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let params = ParameterSet::from_independence(&spec, vec![1.0], vec![vec![0.3, 0.6]]).unwrap();
        let es = e_step(&spec, &params, &counts(&[("11", 5), ("10", 2)])).unwrap();
        assert!(es.posteriors.iter().all(|r| r == &vec![1.0]));
    }

    #[test]
    fn identical_classes_split_evenly() {
        let spec = ModelSpec::independence(["A", "B", "C"], 2);
        let params = ParameterSet::from_independence(&spec, vec![0.5, 0.5], vec![vec![0.3, 0.6, 0.2]; 2]).unwrap();
        let es = e_step(&spec, &params, &counts(&[("111", 5), ("100", 2)])).unwrap();
        assert!(es.posteriors.iter().all(|r| r == &vec![0.5, 0.5]));
    }

    #[test]
    fn m_step_proportions() {
        let spec = ModelSpec::independence(["A", "B"], 2);
        // class 0: 40 units, class 1: 60 units
        let mut c0 = vec![0.0; 4];
        c0[0b00] = 20.0;
        c0[0b10] = 10.0;
        c0[0b11] = 10.0;
        let mut c1 = vec![0.0; 4];
        c1[0b11] = 30.0;
        c1[0b01] = 30.0;
        let params = m_step(&spec, &ExpectedTable { counts: vec![c0, c1] }, IpfControl::default()).unwrap();
        assert_eq!(params.class_weights, vec![0.4, 0.6]);
        assert_eq!(params.inclusion_probs[0], vec![0.5, 0.25]);
        assert_eq!(params.inclusion_probs[1], vec![0.5, 1.0]);
    }

    #[test]
    fn m_step_class_specific_table_is_normalized_block() {
        let spec = ModelSpec::parse_notation("[AX][BCX]", 1).unwrap();
        let mut row: Vec<f64> = vec![0.0; 8];
        row[0b011] = 6.0;
        row[0b110] = 3.0;
        row[0b001] = 1.0;
        let params = m_step(&spec, &ExpectedTable { counts: vec![row] }, IpfControl::default()).unwrap();
        assert_eq!(params.block_tables[0][0], vec![0.0, 0.1, 0.3, 0.6]);
        assert!((params.inclusion_probs[0][1] - 0.9).abs() < 1e-15);
        assert!((params.inclusion_probs[0][2] - 0.7).abs() < 1e-15);
        assert!(crate::model::validate(&spec, &params).is_empty());
    }

    #[test]
    fn shared_term_on_independent_table_recovers_independence() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2).with_term(DependenceTerm::shared(["C", "D"]));
        let indep = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let truth = scenario1(&indep);
        let dist = crate::model::class_conditional(&Layout::new(&indep).unwrap(), &truth);
        let expected = ExpectedTable {
            counts: (0..2)
                .map(|x| dist[x].iter().map(|p| p * 1000.0 * truth.class_weights[x]).collect())
                .collect(),
        };
        let fitted = m_step(&spec, &expected, IpfControl { tol: 1e-14, max_iter: 10_000 }).unwrap();
        assert!(fitted.shared_interactions[0][0].abs() < 1e-10);
        for (a, b) in fitted.inclusion_probs.iter().flatten().zip(truth.inclusion_probs.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shared_term_m_step_matches_margins() {
        let spec = ModelSpec::independence(["A", "C", "D"], 2).with_term(DependenceTerm::shared(["C", "D"]));
        let layout = Layout::new(&spec).unwrap();
        let mut rows = vec![vec![0.0; 8]; 2];
        let vals = [5.0, 9.0, 2.0, 7.0, 3.0, 11.0, 4.0, 6.0];
        for (i, v) in vals.iter().enumerate() {
            rows[0][i] = *v;
            rows[1][i] = v * ((i % 3) as f64 + 1.0);
        }
        let expected = ExpectedTable { counts: rows.clone() };
        let fitted = m_step(&spec, &expected, IpfControl::default()).unwrap();
        // fitted per-class C and D margins reproduce the expected ones
        let marg = crate::model::marginal_inclusion(&layout, &fitted);
        for x in 0..2 {
            let total: f64 = rows[x].iter().sum();
            for r in [1usize, 2] {
                let obs: f64 = (0..8).filter(|i| (i >> (2 - r)) & 1 == 1).map(|i| rows[x][i]).sum();
                assert!((marg[x][r] - obs / total).abs() < 1e-8, "class {x} register {r}");
            }
        }
        let lors = crate::model::block_log_odds_ratios(&layout, &fitted, layout.shared_blocks[0]);
        assert!((lors[0] - lors[1]).abs() < 1e-12);
    }

    #[test]
    fn class_solve_is_lincoln_petersen() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let layout = Layout::new(&spec).unwrap();
        let row: Vec<f64> = vec![0.0, 50.0, 50.0, 50.0];
        let (size, _) = solve_class(&layout, &row, &[], IpfControl::default()).unwrap().unwrap();
        assert!((size - 200.0).abs() < 1e-9, "{size}");

        let row: Vec<f64> = vec![0.0, 700.0, 90.0, 3.0];
        let (size, _) = solve_class(&layout, &row, &[], IpfControl::default()).unwrap().unwrap();
        let lp = 93.0 * 703.0 / 3.0;
        assert!(((size - lp) / lp).abs() < 1e-12, "{size} vs {lp}");
    }

    #[test]
    fn class_solve_caps_unbounded_size() {
        let spec = ModelSpec::independence(["A", "B"], 1);
        let layout = Layout::new(&spec).unwrap();
        let row: Vec<f64> = vec![0.0, 50.0, 50.0, 0.0];
        let (size, fit) = solve_class(&layout, &row, &[], IpfControl::default()).unwrap().unwrap();
        assert!(size >= 100.0 * 1e11);
        assert!(fit.miss() > 1.0 - 1e-9);
    }

    #[test]
    fn loglik_of_petersen_data_at_one_half() {
        let probs = [0.25, 0.25, 0.25, 0.25];
        let counts = [0.0, 50.0, 50.0, 50.0];
        let ll = loglik_from_probs(&probs, &counts);
        assert!((ll - 150.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((ll + 164.79).abs() < 0.01);
    }

    #[test]
    fn full_distribution_feeds_e_step_consistently() {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], 2);
        let params = scenario1(&spec);
        let dist = full_distribution(&spec, &params).unwrap();
        let layout = Layout::new(&spec).unwrap();
        let probs: Vec<f64> = dist.values().copied().collect();
        let mix = crate::model::mixture(&params.class_weights, &class_conditional(&layout, &params));
        assert_eq!(probs, mix);
    }
}
