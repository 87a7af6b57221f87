//! Discrimination and survival statistics: AUROC, Harrell's C-index,
//! Kaplan–Meier curves, the two-group log-rank test and a binary Cox model.

use serde::Serialize;
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("only one class present")]
    SingleClass,
    #[error("non-finite input")]
    NonFinite,
    #[error("a group is empty")]
    EmptyGroup,
    #[error("no events")]
    NoEvents,
    #[error("Cox fit did not converge: {0}")]
    NonConvergence(String),
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    Ok(())
}

fn check_finite(xs: &[f64]) -> Result<(), MetricsError> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// Area under the ROC curve through the rank-sum statistic with midranks
/// for tied scores. Label `true` is the positive class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores.len(), labels.len())?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie block i..=j shares its mean rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fenwick tree over integer counts.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted positions `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index of `risk` against right-censored survival.
///
/// A pair (i, j) is comparable when `time_i < time_j` and `event_i`; it is
/// concordant when `risk_i > risk_j` and counts one half when the risks tie.
/// Pairs with tied times are not comparable. Runs in O(n log n).
pub fn c_index(risk: &[f64], time: &[f64], event: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(risk.len(), time.len())?;
    check_lengths(risk.len(), event.len())?;
    check_finite(risk)?;
    check_finite(time)?;
    let n = risk.len();
    // Dense ranks of the risk values.
    let mut sorted = risk.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&x| x < r);

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut tree = Fenwick::new(sorted.len());
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    // Sweep from the latest time backwards; the tree holds every subject
    // with a strictly later time than the current block.
    let mut end = n;
    while end > 0 {
        let mut start = end - 1;
        while start > 0 && time[by_time[start - 1]] == time[by_time[end - 1]] {
            start -= 1;
        }
        let later = (n - end) as u64;
        for &i in &by_time[start..end] {
            if event[i] {
                let r = rank(risk[i]);
                let below = tree.prefix(r);
                let at_or_below = tree.prefix(r + 1);
                concordant += below;
                tied += at_or_below - below;
                comparable += later;
            }
        }
        for &i in &by_time[start..end] {
            tree.add(rank(risk[i]));
        }
        end = start;
    }
    if comparable == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok((2 * concordant + tied) as f64 / (2 * comparable) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

/// Kaplan–Meier product-limit estimate with one step per distinct time
/// (event or censoring).
pub fn km_curve(time: &[f64], event: &[bool]) -> Result<Vec<KmStep>, MetricsError> {
    check_lengths(time.len(), event.len())?;
    check_finite(time)?;
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut at_risk = time.len();
    let mut survival = 1.0;
    let mut steps = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = time[order[i]];
        let mut j = i;
        while j < order.len() && time[order[j]] == t {
            j += 1;
        }
        let events = order[i..j].iter().filter(|&&k| event[k]).count();
        if events > 0 {
            survival *= 1.0 - events as f64 / at_risk as f64;
        }
        steps.push(KmStep {
            time: t,
            survival,
            at_risk,
            events,
            censored: (j - i) - events,
        });
        at_risk -= j - i;
        i = j;
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_group1: f64,
    pub expected_group1: f64,
}

/// Two-group log-rank test with the hypergeometric variance; `p` from the
/// χ² distribution with one degree of freedom.
pub fn logrank(time: &[f64], event: &[bool], group: &[bool]) -> Result<LogRankResult, MetricsError> {
    check_lengths(time.len(), event.len())?;
    check_lengths(time.len(), group.len())?;
    check_finite(time)?;
    let n1_total = group.iter().filter(|&&g| g).count();
    if n1_total == 0 || n1_total == group.len() {
        return Err(MetricsError::EmptyGroup);
    }
    if !event.iter().any(|&e| e) {
        return Err(MetricsError::NoEvents);
    }
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let (mut n, mut n1) = (time.len() as f64, n1_total as f64);
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = time[order[i]];
        let mut j = i;
        while j < order.len() && time[order[j]] == t {
            j += 1;
        }
        let block = &order[i..j];
        let d = block.iter().filter(|&&k| event[k]).count() as f64;
        let d1 = block.iter().filter(|&&k| event[k] && group[k]).count() as f64;
        if d > 0.0 {
            obs += d1;
            exp += d * n1 / n;
            if n > 1.0 {
                var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
            }
        }
        n -= block.len() as f64;
        n1 -= block.iter().filter(|&&k| group[k]).count() as f64;
        i = j;
    }
    if var <= 0.0 {
        return Err(MetricsError::NoComparablePairs);
    }
    let chi2 = (obs - exp).powi(2) / var;
    Ok(LogRankResult {
        chi2,
        p_value: erfc((chi2 / 2.0).sqrt()),
        observed_group1: obs,
        expected_group1: exp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxResult {
    /// Log hazard ratio of group 1 relative to group 0.
    pub beta: f64,
    pub hazard_ratio: f64,
    pub se: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Risk-set summary at one distinct event time.
struct RiskSet {
    /// Events in group 1 and group 0.
    s: f64,
    r: f64,
    /// Subjects at risk in group 1 and group 0.
    n1: f64,
    n0: f64,
}

fn risk_sets(time: &[f64], event: &[bool], group: &[bool]) -> Vec<RiskSet> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut n1 = group.iter().filter(|&&g| g).count() as f64;
    let mut n0 = group.len() as f64 - n1;
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = time[order[i]];
        let mut j = i;
        while j < order.len() && time[order[j]] == t {
            j += 1;
        }
        let block = &order[i..j];
        let s = block.iter().filter(|&&k| event[k] && group[k]).count() as f64;
        let r = block.iter().filter(|&&k| event[k] && !group[k]).count() as f64;
        if s + r > 0.0 {
            out.push(RiskSet { s, r, n1, n0 });
        }
        let g1 = block.iter().filter(|&&k| group[k]).count() as f64;
        n1 -= g1;
        n0 -= block.len() as f64 - g1;
        i = j;
    }
    out
}

/// Breslow partial log-likelihood, score and information at `beta`.
///
/// Written symmetrically in the two groups (`a = n1·e^{β/2}`,
/// `b = n0·e^{−β/2}`) so that swapping the groups maps β to −β exactly.
fn cox_terms(sets: &[RiskSet], beta: f64) -> (f64, f64, f64) {
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    let (up, down) = ((beta / 2.0).exp(), (-beta / 2.0).exp());
    for rs in sets {
        let a = rs.n1 * up;
        let b = rs.n0 * down;
        let total = a + b;
        let p = a / total;
        let q = b / total;
        let d = rs.s + rs.r;
        ll += (rs.s - rs.r) * beta / 2.0 - d * total.ln();
        score += rs.s * q - rs.r * p;
        info += d * (p * q);
    }
    (ll, score, info)
}

/// Newton–Raphson fit of a Cox model with a single binary covariate.
/// `group[i]` is the covariate (`true` = 1). Ties use the Breslow
/// approximation. The fit fails when the estimate diverges (|β| > 50),
/// which happens when one group has no events or the groups are perfectly
/// separated in time.
pub fn cox_binary_hr(time: &[f64], event: &[bool], group: &[bool]) -> Result<CoxResult, MetricsError> {
    check_lengths(time.len(), event.len())?;
    check_lengths(time.len(), group.len())?;
    check_finite(time)?;
    let n1 = group.iter().filter(|&&g| g).count();
    if n1 == 0 || n1 == group.len() {
        return Err(MetricsError::EmptyGroup);
    }
    if !event.iter().any(|&e| e) {
        return Err(MetricsError::NoEvents);
    }
    let sets = risk_sets(time, event, group);
    // The likelihood increases without bound towards +∞ when every event
    // with group-0 members present comes from group 1 (and the mirror case
    // for −∞); no finite maximum exists then.
    let to_plus = sets.iter().all(|rs| rs.r == 0.0 || rs.n1 == 0.0);
    let to_minus = sets.iter().all(|rs| rs.s == 0.0 || rs.n0 == 0.0);
    if to_plus || to_minus {
        return Err(MetricsError::NonConvergence("monotone likelihood; the estimate is infinite".into()));
    }
    let mut beta = 0.0;
    let (mut ll, mut score, mut info) = cox_terms(&sets, beta);
    for iteration in 1..=50 {
        if info <= 0.0 || !info.is_finite() {
            return Err(MetricsError::NonConvergence("information matrix is singular".into()));
        }
        let mut step = score / info;
        let mut candidate = beta + step;
        let mut terms = cox_terms(&sets, candidate);
        let mut halvings = 0;
        while !(terms.0 >= ll - 1e-12) && halvings < 30 {
            step /= 2.0;
            candidate = beta + step;
            terms = cox_terms(&sets, candidate);
            halvings += 1;
        }
        let converged = (candidate - beta).abs() < 1e-10 || (terms.0 - ll).abs() < 1e-14 * ll.abs().max(1.0);
        beta = candidate;
        (ll, score, info) = terms;
        if beta.abs() > 50.0 {
            return Err(MetricsError::NonConvergence(format!("estimate diverged (beta = {beta:.3})")));
        }
        if converged && score.abs() < 1e-8 {
            if info <= 0.0 {
                return Err(MetricsError::NonConvergence("zero information at the optimum".into()));
            }
            return Ok(CoxResult {
                beta,
                hazard_ratio: beta.exp(),
                se: 1.0 / info.sqrt(),
                log_likelihood: ll,
                iterations: iteration,
            });
        }
    }
    Err(MetricsError::NonConvergence("iteration limit reached".into()))
}
