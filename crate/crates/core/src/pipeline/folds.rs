use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::cell_table::SurvivalLabel;

/// A patient as seen by the fold splitter.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumKey {
    pub patient_id: String,
    pub label: SurvivalLabel,
    pub stage_binary: bool,
}

/// Patient-level k-fold split stratified jointly on label and binary stage.
///
/// Within each stratum (visited in a fixed order) patients are shuffled with
/// the seeded generator and dealt round-robin, continuing from where the
/// previous stratum stopped so that fold sizes stay within one of each
/// other. Returns the test patients of each fold, sorted by id.
pub fn stratified_kfold(patients: &[StratumKey], k: usize, seed: u64) -> Result<Vec<Vec<String>>, PipelineError> {
    if k < 2 {
        return Err(PipelineError::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    if patients.len() < k {
        return Err(PipelineError::TooFewPatients { patients: patients.len(), k });
    }
    let mut strata: BTreeMap<(usize, bool), Vec<&str>> = BTreeMap::new();
    for p in patients {
        strata.entry((p.label.class_index(), p.stage_binary)).or_default().push(&p.patient_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for ((label, stage), mut ids) in strata {
        if ids.len() < k {
            log::warn!("stratum (label {label}, stage {stage}) has {} patients for {k} folds", ids.len());
        }
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        for (j, id) in ids.iter().enumerate() {
            folds[(offset + j) % k].push(id.to_string());
        }
        offset = (offset + ids.len()) % k;
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

/// Splits training patients into (train, validation) with the validation
/// share taken per label so both classes stay represented.
pub fn validation_split(patients: &[StratumKey], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut by_label: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for p in patients {
        by_label.entry(p.label.class_index()).or_default().push(&p.patient_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut ids) in by_label {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut n_val = (fraction * ids.len() as f64).round() as usize;
        if fraction > 0.0 && n_val == 0 && ids.len() >= 4 {
            n_val = 1;
        }
        // Never leave a class without training examples.
        n_val = n_val.min(ids.len().saturating_sub(1));
        val.extend(ids[..n_val].iter().map(|s| s.to_string()));
        train.extend(ids[n_val..].iter().map(|s| s.to_string()));
    }
    train.sort();
    val.sort();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cohort(counts: [usize; 4]) -> Vec<StratumKey> {
        let mut out = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                out.push(StratumKey {
                    patient_id: format!("p{s}_{i:03}"),
                    label: if s / 2 == 0 { SurvivalLabel::Long } else { SurvivalLabel::Short },
                    stage_binary: s % 2 == 1,
                });
            }
        }
        out
    }

    #[test]
    fn balanced_strata_give_one_per_fold() {
        let pts = cohort([5, 5, 5, 5]);
        let folds = stratified_kfold(&pts, 5, 3).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 4);
            let mut strata: Vec<&str> = f.iter().map(|id| &id[..2]).collect();
            strata.sort();
            assert_eq!(strata, vec!["p0", "p1", "p2", "p3"]);
        }
    }

    #[test]
    fn same_seed_same_folds() {
        let pts = cohort([7, 3, 9, 4]);
        assert_eq!(stratified_kfold(&pts, 5, 11).unwrap(), stratified_kfold(&pts, 5, 11).unwrap());
        assert_ne!(stratified_kfold(&pts, 5, 11).unwrap(), stratified_kfold(&pts, 5, 12).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(stratified_kfold(&cohort([1, 1, 0, 0]), 5, 0), Err(PipelineError::TooFewPatients { .. })));
        assert!(stratified_kfold(&cohort([5, 5, 5, 5]), 1, 0).is_err());
    }

    #[test]
    fn validation_keeps_both_classes() {
        let pts = cohort([10, 10, 3, 3]);
        let (train, val) = validation_split(&pts, 0.15, 1);
        assert_eq!(train.len() + val.len(), 26);
        assert_eq!(val.len(), 3 + 1);
        assert!(train.iter().any(|id| id.starts_with("p2") || id.starts_with("p3")));
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(counts in proptest::array::uniform4(0usize..15), k in 2usize..7, seed in any::<u64>()) {
            let pts = cohort(counts);
            prop_assume!(pts.len() >= k);
            let folds = stratified_kfold(&pts, k, seed).unwrap();
            let mut all: Vec<String> = folds.iter().flatten().cloned().collect();
            all.sort();
            let mut ids: Vec<String> = pts.iter().map(|p| p.patient_id.clone()).collect();
            ids.sort();
            prop_assert_eq!(all, ids);
            for s in 0..4 {
                let prefix = format!("p{s}_");
                let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|id| id.starts_with(&prefix)).count()).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
