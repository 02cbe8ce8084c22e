//! Iterative embedding-based label cleaning.
//!
//! One round filters samples far from their class center, recomputes the
//! centers from the survivors, merges classes whose centers nearly coincide,
//! drops classes that became too small and relabels densely. Rounds repeat
//! (optionally re-embedding in between) until nothing changes.

use std::collections::BTreeSet;

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::loss::normalize_in_place;
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;
use crate::synth::NoiseTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    pub thre_intra: f64,
    pub thre_inter: f64,
    pub max_iters: usize,
    pub min_class_size: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            thre_intra: 0.45,
            thre_inter: 0.75,
            max_iters: 5,
            min_class_size: 2,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("thre_intra", self.thre_intra), ("thre_inter", self.thre_inter)] {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("{name} = {t} outside [-1, 1]")));
            }
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.thre_inter <= self.thre_intra {
            w.push(format!(
                "thre_inter ({}) <= thre_intra ({}): merging may swallow distinct identities",
                self.thre_inter, self.thre_intra
            ));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Original indices of samples removed by the intra-class filter.
    pub removed: Vec<usize>,
    /// Original indices of samples lost because their class fell below the minimum size.
    pub dropped: Vec<usize>,
    /// Groups (size ≥ 2) of this round's input labels that were merged.
    pub merged_groups: Vec<Vec<usize>>,
    pub centers_before: usize,
    pub centers_after: usize,
    /// Output label of each input label, `None` when the class disappeared.
    pub label_map: Vec<Option<usize>>,
}

impl RoundReport {
    pub fn changed(&self) -> bool {
        !self.removed.is_empty() || !self.dropped.is_empty() || !self.merged_groups.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub n_samples: usize,
    pub n_labels: usize,
    pub rounds: Vec<RoundReport>,
    pub converged: bool,
}

impl CleaningReport {
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }

    /// Every original sample index that did not survive, ascending.
    pub fn all_removed(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .rounds
            .iter()
            .flat_map(|r| r.removed.iter().chain(&r.dropped).copied())
            .collect();
        set.into_iter().collect()
    }

    /// Groups of original labels that ended up merged at some point, each sorted.
    pub fn merged_label_groups(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::<usize>::new(self.n_labels);
        let mut rep: Vec<Option<usize>> = (0..self.n_labels).map(Some).collect();
        for round in &self.rounds {
            for g in &round.merged_groups {
                let Some(first) = rep[g[0]] else { continue };
                for &m in &g[1..] {
                    if let Some(r) = rep[m] {
                        uf.union(first, r);
                    }
                }
            }
            let mut next = vec![None; round.centers_after];
            for (old, new) in round.label_map.iter().enumerate() {
                if let (Some(new), Some(r)) = (new, rep[old]) {
                    next[*new].get_or_insert(r);
                }
            }
            rep = next;
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.n_labels];
        for l in 0..self.n_labels {
            groups[uf.find(l)].push(l);
        }
        groups.retain(|g| g.len() > 1);
        groups.sort();
        groups
    }
}

fn members_by_class(labels: &[usize], n_ids: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_ids];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn center_of<T: Scalar>(features: &Matrix<T>, rows: &[usize], class: usize) -> Result<Vec<T>> {
    if rows.is_empty() {
        return Err(Error::EmptyClass { class });
    }
    let mut c = vec![T::zero(); features.cols()];
    for &i in rows {
        for (a, &x) in c.iter_mut().zip(features.row(i)) {
            *a = *a + x;
        }
    }
    // scaling by 1/n does not change the direction
    normalize_in_place(&mut c).ok_or(Error::DegenerateCenter { class })?;
    Ok(c)
}

fn centers_from_members<T: Scalar>(features: &Matrix<T>, members: &[Vec<usize>]) -> Result<Matrix<T>> {
    let rows: Vec<Vec<T>> = members
        .par_iter()
        .enumerate()
        .map(|(c, rows)| center_of(features, rows, c))
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    Matrix::from_vec(members.len(), features.cols(), data)
}

/// Normalized mean feature of every class.
pub fn class_centers<T: Scalar>(ds: &EmbeddingDataset<T>) -> Result<Matrix<T>> {
    centers_from_members(&ds.features, &members_by_class(&ds.labels, ds.n_ids))
}

fn clamped_cos<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    dot(a, b).to_f64_exact().clamp(-1.0, 1.0)
}

/// Splits sample indices into `(kept, removed)`; a sample is removed iff its
/// cosine to its own center is below `thre_intra`.
pub fn intra_filter<T: Scalar>(
    ds: &EmbeddingDataset<T>,
    centers: &Matrix<T>,
    thre_intra: f64,
) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..ds.n())
        .into_par_iter()
        .map(|i| clamped_cos(ds.features.row(i), centers.row(ds.labels[i])) >= thre_intra)
        .collect();
    (0..ds.n()).partition(|&i| keep[i])
}

/// Old class id → new id. Classes connected by center cosines strictly above
/// `thre_inter` share an id; ids are dense and ordered by smallest member.
pub fn inter_merge<T: Scalar>(centers: &Matrix<T>, thre_inter: f64) -> Vec<usize> {
    let c = centers.rows();
    let edges: Vec<(usize, usize)> = (0..c)
        .into_par_iter()
        .flat_map_iter(|i| {
            ((i + 1)..c)
                .filter(move |&j| clamped_cos(centers.row(i), centers.row(j)) > thre_inter)
                .map(move |j| (i, j))
        })
        .collect();
    let mut uf = UnionFind::<usize>::new(c);
    for (i, j) in edges {
        uf.union(i, j);
    }
    let mut root_id = vec![usize::MAX; c];
    let mut next = 0;
    (0..c)
        .map(|i| {
            let r = uf.find(i);
            if root_id[r] == usize::MAX {
                root_id[r] = next;
                next += 1;
            }
            root_id[r]
        })
        .collect()
}

fn groups_of(remap: &[usize]) -> Vec<Vec<usize>> {
    let n = remap.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); n];
    for (old, &new) in remap.iter().enumerate() {
        groups[new].push(old);
    }
    groups
}

/// One filter → re-center → merge → drop → relabel pass.
pub fn clean_round<T: Scalar>(
    ds: &EmbeddingDataset<T>,
    cfg: &CleaningConfig,
) -> Result<(EmbeddingDataset<T>, RoundReport)> {
    cfg.validate()?;
    let centers = class_centers(ds)?;
    let (kept, removed) = intra_filter(ds, &centers, cfg.thre_intra);
    if kept.is_empty() {
        return Err(Error::AllRemoved);
    }

    // classes that still have survivors, compacted in label order
    let mut survivors = vec![Vec::new(); ds.n_ids];
    for &i in &kept {
        survivors[ds.labels[i]].push(i);
    }
    let alive: Vec<usize> = (0..ds.n_ids).filter(|&c| !survivors[c].is_empty()).collect();
    let alive_members: Vec<Vec<usize>> = alive.iter().map(|&c| survivors[c].clone()).collect();
    let centers = centers_from_members(&ds.features, &alive_members)
        .map_err(|e| match e {
            Error::DegenerateCenter { class } => Error::DegenerateCenter { class: alive[class] },
            e => e,
        })?;

    let merge = inter_merge(&centers, cfg.thre_inter);
    let merged_groups: Vec<Vec<usize>> = groups_of(&merge)
        .into_iter()
        .filter(|g| g.len() > 1)
        .map(|g| g.into_iter().map(|k| alive[k]).collect())
        .collect();

    let mut merged_size = vec![0usize; merge.iter().max().map_or(0, |&m| m + 1)];
    for (k, &m) in merge.iter().enumerate() {
        merged_size[m] += alive_members[k].len();
    }
    let mut final_id = vec![None; merged_size.len()];
    let mut next = 0;
    for (m, &size) in merged_size.iter().enumerate() {
        if size >= cfg.min_class_size {
            final_id[m] = Some(next);
            next += 1;
        }
    }
    let mut label_map = vec![None; ds.n_ids];
    for (k, &c) in alive.iter().enumerate() {
        label_map[c] = final_id[merge[k]];
    }

    let (retained, dropped): (Vec<usize>, Vec<usize>) =
        kept.into_iter().partition(|&i| label_map[ds.labels[i]].is_some());
    if retained.is_empty() {
        return Err(Error::AllRemoved);
    }
    let remap: Vec<usize> = label_map.iter().map(|m| m.unwrap_or(usize::MAX)).collect();
    let out = ds.subset(&retained, &remap, next);

    let report = RoundReport {
        removed: removed.iter().map(|&i| ds.original_index(i)).collect(),
        dropped: dropped.iter().map(|&i| ds.original_index(i)).collect(),
        merged_groups,
        centers_before: ds.n_ids,
        centers_after: next,
        label_map,
    };
    Ok((out, report))
}

/// Repeats [`clean_round`] followed by `reembed` until a round changes
/// nothing or `max_iters` rounds ran.
pub fn iterate_clean<T, F>(
    ds: &EmbeddingDataset<T>,
    cfg: &CleaningConfig,
    mut reembed: F,
) -> Result<(EmbeddingDataset<T>, CleaningReport)>
where
    T: Scalar,
    F: FnMut(EmbeddingDataset<T>) -> Result<EmbeddingDataset<T>>,
{
    cfg.validate()?;
    let mut report = CleaningReport {
        n_samples: ds.n(),
        n_labels: ds.n_ids,
        rounds: Vec::new(),
        converged: false,
    };
    let mut cur = ds.clone();
    for _ in 0..cfg.max_iters {
        let (next, round) = clean_round(&cur, cfg)?;
        let changed = round.changed();
        report.rounds.push(round);
        if !changed {
            report.converged = true;
            break;
        }
        cur = reembed(next)?;
    }
    Ok((cur, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningMetrics {
    pub outlier_precision: f64,
    pub outlier_recall: f64,
    pub merge_precision: f64,
    pub merge_recall: f64,
    pub removed: usize,
    pub planted: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision/recall of removed samples against planted outliers, and of
/// merged label pairs against split identities.
pub fn evaluate_cleaning(report: &CleaningReport, truth: &NoiseTruth) -> Result<CleaningMetrics> {
    if truth.identity.len() != report.n_samples {
        return Err(Error::TruthMismatch(format!(
            "truth covers {} samples, report {}",
            truth.identity.len(),
            report.n_samples
        )));
    }
    if let Some(&i) = truth.outliers.iter().find(|&&i| i >= report.n_samples) {
        return Err(Error::TruthMismatch(format!("outlier index {i} out of range")));
    }
    let pair = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut true_pairs = BTreeSet::new();
    for &(a, b) in &truth.split_pairs {
        if a >= report.n_labels || b >= report.n_labels {
            return Err(Error::TruthMismatch(format!("split pair ({a}, {b}) out of label range")));
        }
        true_pairs.insert(pair(a, b));
    }

    let removed: BTreeSet<usize> = report.all_removed().into_iter().collect();
    let planted: BTreeSet<usize> = truth.outliers.iter().copied().collect();
    let hit = removed.intersection(&planted).count();

    let mut pred_pairs = BTreeSet::new();
    for g in report.merged_label_groups() {
        for (x, &a) in g.iter().enumerate() {
            for &b in &g[x + 1..] {
                pred_pairs.insert(pair(a, b));
            }
        }
    }
    let merge_hit = pred_pairs.intersection(&true_pairs).count();

    Ok(CleaningMetrics {
        outlier_precision: ratio(hit, removed.len()),
        outlier_recall: ratio(hit, planted.len()),
        merge_precision: ratio(merge_hit, pred_pairs.len()),
        merge_recall: ratio(merge_hit, true_pairs.len()),
        removed: removed.len(),
        planted: planted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn ds(rows: &[Vec<f64>], labels: &[usize]) -> EmbeddingDataset<f64> {
        EmbeddingDataset::from_raw(&Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn center_examples() {
        let single = ds(&[e(1, 3)], &[0]);
        assert_eq!(class_centers(&single).unwrap().row(0), e(1, 3));

        let anti = ds(&[e(0, 3), vec![-1.0, 0.0, 0.0]], &[0, 0]);
        assert!(matches!(class_centers(&anti), Err(Error::DegenerateCenter { class: 0 })));

        let three = ds(&[e(0, 4), e(0, 4), e(1, 4)], &[0, 0, 0]);
        let c = class_centers(&three).unwrap();
        assert_abs_diff_eq!(c.row(0)[0], 2.0 / 5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.row(0)[1], 1.0 / 5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.row(0)[0], 0.8944, epsilon = 1e-4);

        let gap = ds(&[e(0, 2)], &[1]);
        assert!(matches!(class_centers(&gap), Err(Error::EmptyClass { class: 0 })));
    }

    #[test]
    fn filter_examples() {
        let three = ds(&[e(0, 4), e(0, 4), e(1, 4)], &[0, 0, 0]);
        let c = class_centers(&three).unwrap();
        assert_eq!(intra_filter(&three, &c, -1.0), (vec![0, 1, 2], vec![]));
        assert_eq!(intra_filter(&three, &c, 0.5), (vec![0, 1], vec![2]));

        let same = ds(&vec![vec![0.6, 0.8]; 4], &[0; 4]);
        let c = class_centers(&same).unwrap();
        assert!(intra_filter(&same, &c, 1.0).1.is_empty());
    }

    #[test]
    fn merge_examples() {
        let c2 = {
            let mut v = vec![1.0, 0.1, 0.0];
            normalize_in_place(&mut v);
            v
        };
        let centers = Matrix::from_rows(&[e(0, 3), c2.clone(), e(2, 3)]).unwrap();
        assert_eq!(inter_merge(&centers, 1.0), vec![0, 1, 2]);
        assert_eq!(inter_merge(&centers, 0.8), vec![0, 0, 1]);

        // chain 0~1~3 with cos(0, 3) below the threshold
        let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin(), 0.0, 0.0];
        let chain = Matrix::from_rows(&[at(0.0), at(30.0), e(3, 4), at(60.0)]).unwrap();
        assert!(dot(chain.row(0), chain.row(3)) < 0.8);
        assert_eq!(inter_merge(&chain, 0.8), vec![0, 0, 1, 0]);
    }

    #[test]
    fn identical_centers_do_not_exceed_one() {
        let centers = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert_eq!(inter_merge(&centers, 1.0), vec![0, 1]);
    }

    #[test]
    fn clean_fixed_point() {
        let clean = ds(&[e(0, 3), e(0, 3), e(1, 3), e(1, 3), e(2, 3), e(2, 3)], &[0, 0, 1, 1, 2, 2]);
        let (out, r) = clean_round(&clean, &CleaningConfig::default()).unwrap();
        assert!(!r.changed());
        assert_eq!(out.labels, clean.labels);
        assert_eq!(r.label_map, vec![Some(0), Some(1), Some(2)]);
        let (_, rep) = iterate_clean(&clean, &CleaningConfig::default(), Ok).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.round_count(), 1);
    }

    #[test]
    fn round_drops_small_classes_and_relabels() {
        // class 1 loses its stray member and falls below two samples
        let d = ds(
            &[e(0, 3), e(0, 3), e(1, 3), e(2, 3), e(2, 3), e(2, 3), e(0, 3)],
            &[0, 0, 1, 2, 2, 2, 2],
        );
        let (out, r) = clean_round(&d, &CleaningConfig::default()).unwrap();
        assert_eq!(r.removed, vec![6]);
        assert_eq!(r.dropped, vec![2]);
        assert_eq!(r.label_map, vec![Some(0), None, Some(1)]);
        assert_eq!(out.labels, vec![0, 0, 1, 1, 1]);
        assert_eq!(out.original_indices(), vec![0, 1, 3, 4, 5]);
        assert_eq!(r.centers_after, 2);
    }

    #[test]
    fn all_removed() {
        let d = ds(&[e(0, 2), e(1, 2)], &[0, 1]);
        assert!(matches!(clean_round(&d, &CleaningConfig::default()), Err(Error::AllRemoved)));
    }

    #[test]
    fn zero_iterations() {
        let d = ds(&[e(0, 2), e(0, 2)], &[0, 0]);
        let cfg = CleaningConfig {
            max_iters: 0,
            ..Default::default()
        };
        let (out, rep) = iterate_clean(&d, &cfg, Ok).unwrap();
        assert_eq!(out, d);
        assert!(rep.rounds.is_empty());
        assert!(!rep.converged);
    }

    #[test]
    fn warns_on_inverted_thresholds() {
        let cfg = CleaningConfig {
            thre_intra: 0.8,
            thre_inter: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.warnings().len(), 1);
        assert!(CleaningConfig::default().warnings().is_empty());
    }

    fn report_with(removed: Vec<usize>, n: usize) -> CleaningReport {
        CleaningReport {
            n_samples: n,
            n_labels: 2,
            rounds: vec![RoundReport {
                removed,
                dropped: vec![],
                merged_groups: vec![],
                centers_before: 2,
                centers_after: 2,
                label_map: vec![Some(0), Some(1)],
            }],
            converged: true,
        }
    }

    #[test]
    fn metric_conventions() {
        let truth = NoiseTruth {
            identity: vec![0; 10],
            outliers: vec![1, 2, 3, 4],
            split_pairs: vec![],
        };
        let m = evaluate_cleaning(&report_with(vec![1, 2, 3, 4], 10), &truth).unwrap();
        assert_eq!((m.outlier_precision, m.outlier_recall), (1.0, 1.0));
        let m = evaluate_cleaning(&report_with(vec![], 10), &truth).unwrap();
        assert_eq!((m.outlier_precision, m.outlier_recall), (1.0, 0.0));
        let m = evaluate_cleaning(&report_with(vec![1, 2], 10), &truth).unwrap();
        assert_eq!((m.outlier_precision, m.outlier_recall), (1.0, 0.5));
        assert!(matches!(
            evaluate_cleaning(&report_with(vec![], 9), &truth),
            Err(Error::TruthMismatch(_))
        ));
    }

    #[test]
    fn merged_groups_follow_relabelling() {
        // round 1 merges labels 1 and 3 (new id 1); round 2 merges new ids 0 and 1
        let rep = CleaningReport {
            n_samples: 0,
            n_labels: 4,
            rounds: vec![
                RoundReport {
                    removed: vec![],
                    dropped: vec![],
                    merged_groups: vec![vec![1, 3]],
                    centers_before: 4,
                    centers_after: 2,
                    label_map: vec![Some(0), Some(1), None, Some(1)],
                },
                RoundReport {
                    removed: vec![],
                    dropped: vec![],
                    merged_groups: vec![vec![0, 1]],
                    centers_before: 2,
                    centers_after: 1,
                    label_map: vec![Some(0), Some(0)],
                },
            ],
            converged: false,
        };
        assert_eq!(rep.merged_label_groups(), vec![vec![0, 1, 3]]);
    }
}
