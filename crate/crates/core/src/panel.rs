//! Longitudinal cluster-randomized panel: student-year observations, their
//! cohort-year groups, and validation of the structural invariants.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One student-year row. Identifiers are ordinals into the label tables of
/// the owning [`PanelDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub unit: usize,
    pub cluster: usize,
    pub block: Option<usize>,
    pub treated: bool,
    pub cohort: i32,
    pub grade: i32,
    /// Year of participation, starting at 1.
    pub year: u32,
    pub outcome: f64,
    pub tested_in: bool,
    pub covariates: Vec<f64>,
}

impl Observation {
    /// Grade at the unit's first year of participation.
    pub fn entry_grade(&self) -> i32 {
        self.grade - (self.year as i32 - 1)
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey { cohort: self.cohort, entry_grade: self.entry_grade(), year: self.year }
    }
}

/// Cohort-year cell identifying an effect group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub cohort: i32,
    pub entry_grade: i32,
    pub year: u32,
}

/// Catalog row for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    /// 1-based group ordinal.
    pub g: usize,
    pub cohort: i32,
    pub entry_grade: i32,
    pub year: u32,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

impl GroupInfo {
    pub fn key(&self) -> GroupKey {
        GroupKey { cohort: self.cohort, entry_grade: self.entry_grade, year: self.year }
    }

    /// Both arms are represented.
    pub fn is_estimable(&self) -> bool {
        self.n_treated > 0 && self.n_control > 0
    }
}

/// Validated, immutable panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<Observation>,
    /// Group ordinal (0-based) per observation.
    group_of: Vec<usize>,
    groups: Vec<GroupInfo>,
    unit_labels: Vec<String>,
    cluster_labels: Vec<String>,
    block_labels: Vec<String>,
    cluster_treated: Vec<bool>,
    covariate_names: Vec<String>,
    has_test_in: bool,
}

impl PanelDataset {
    /// Validates interned observations and builds the group index.
    pub fn from_parts(
        observations: Vec<Observation>,
        unit_labels: Vec<String>,
        cluster_labels: Vec<String>,
        block_labels: Vec<String>,
        covariate_names: Vec<String>,
        has_test_in: bool,
    ) -> Result<Self> {
        let n_units = unit_labels.len();
        let n_clusters = cluster_labels.len();
        let k = covariate_names.len();

        let mut cluster_arm: Vec<Option<bool>> = vec![None; n_clusters];
        let mut unit_cluster: Vec<Option<usize>> = vec![None; n_units];
        for (i, o) in observations.iter().enumerate() {
            if o.unit >= n_units || o.cluster >= n_clusters {
                return Err(Error::Dimension(format!("row {} references an unknown label", i + 1)));
            }
            if o.block.is_some_and(|b| b >= block_labels.len()) {
                return Err(Error::Dimension(format!("row {} references an unknown block", i + 1)));
            }
            if o.year < 1 {
                return Err(Error::InvalidArgument(format!("row {}: follow-up year must be >= 1", i + 1)));
            }
            if o.covariates.len() != k {
                return Err(Error::Dimension(format!(
                    "row {}: {} covariates, expected {k}",
                    i + 1,
                    o.covariates.len()
                )));
            }
            match cluster_arm[o.cluster] {
                None => cluster_arm[o.cluster] = Some(o.treated),
                Some(z) if z != o.treated => {
                    return Err(Error::TreatmentVariesWithinCluster(cluster_labels[o.cluster].clone()))
                }
                _ => {}
            }
            match unit_cluster[o.unit] {
                None => unit_cluster[o.unit] = Some(o.cluster),
                Some(c) if c != o.cluster => return Err(Error::UnitSwitchesCluster(unit_labels[o.unit].clone())),
                _ => {}
            }
        }

        let mut order: Vec<usize> = (0..observations.len()).collect();
        order.sort_by_key(|&i| (observations[i].unit, observations[i].year));
        for w in order.windows(2) {
            let (a, b) = (&observations[w[0]], &observations[w[1]]);
            if a.unit == b.unit {
                if a.year == b.year {
                    return Err(Error::DuplicateObservation { unit: unit_labels[a.unit].clone(), year: a.year });
                }
                if has_test_in && a.tested_in && !b.tested_in {
                    return Err(Error::NonMonotoneTestIn(unit_labels[a.unit].clone()));
                }
            }
        }

        let mut index: BTreeMap<GroupKey, usize> = BTreeMap::new();
        for o in &observations {
            index.entry(o.group_key()).or_insert(0);
        }
        let mut groups: Vec<GroupInfo> = Vec::with_capacity(index.len());
        for (g, (key, slot)) in index.iter_mut().enumerate() {
            *slot = g;
            groups.push(GroupInfo {
                g: g + 1,
                cohort: key.cohort,
                entry_grade: key.entry_grade,
                year: key.year,
                n: 0,
                n_treated: 0,
                n_control: 0,
            });
        }
        let group_of: Vec<usize> = observations.iter().map(|o| index[&o.group_key()]).collect();
        for (o, &g) in observations.iter().zip(&group_of) {
            let info = &mut groups[g];
            info.n += 1;
            if o.treated {
                info.n_treated += 1;
            } else {
                info.n_control += 1;
            }
        }

        let cluster_treated = cluster_arm.into_iter().map(|z| z.unwrap_or(false)).collect();
        Ok(Self {
            observations,
            group_of,
            groups,
            unit_labels,
            cluster_labels,
            block_labels,
            cluster_treated,
            covariate_names,
            has_test_in,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// 0-based group ordinal of observation `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    pub fn group_ordinals(&self) -> &[usize] {
        &self.group_of
    }

    /// Group catalog ordered by (cohort, entry grade, follow-up year).
    pub fn catalog(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn n_units(&self) -> usize {
        self.unit_labels.len()
    }

    pub fn unit_label(&self, u: usize) -> &str {
        &self.unit_labels[u]
    }

    pub fn cluster_label(&self, c: usize) -> &str {
        &self.cluster_labels[c]
    }

    pub fn block_label(&self, b: usize) -> &str {
        &self.block_labels[b]
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    pub fn block_labels(&self) -> &[String] {
        &self.block_labels
    }

    pub fn cluster_is_treated(&self, c: usize) -> bool {
        self.cluster_treated[c]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn has_test_in(&self) -> bool {
        self.has_test_in
    }

    /// Counts of treated and control clusters.
    pub fn arm_cluster_counts(&self) -> (usize, usize) {
        let treated = self.cluster_treated.iter().filter(|&&z| z).count();
        (treated, self.cluster_treated.len() - treated)
    }

    /// Consumes the panel, returning its parts for modification and
    /// re-validation through [`PanelDataset::from_parts`].
    pub fn into_parts(self) -> PanelParts {
        PanelParts {
            observations: self.observations,
            unit_labels: self.unit_labels,
            cluster_labels: self.cluster_labels,
            block_labels: self.block_labels,
            covariate_names: self.covariate_names,
            has_test_in: self.has_test_in,
        }
    }

    /// Copy of the panel with outcomes replaced; structure is unchanged so no
    /// re-validation is needed.
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Self> {
        if outcomes.len() != self.len() {
            return Err(Error::Dimension("outcome vector length".into()));
        }
        let mut out = self.clone();
        for (o, &y) in out.observations.iter_mut().zip(outcomes) {
            o.outcome = y;
        }
        Ok(out)
    }

    /// Row indices of each unit, ordered by follow-up year.
    pub fn unit_histories(&self) -> Vec<Vec<usize>> {
        unit_histories(&self.observations, self.n_units())
    }
}

/// Owned constituents of a panel.
#[derive(Debug, Clone)]
pub struct PanelParts {
    pub observations: Vec<Observation>,
    pub unit_labels: Vec<String>,
    pub cluster_labels: Vec<String>,
    pub block_labels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub has_test_in: bool,
}

impl PanelParts {
    pub fn build(self) -> Result<PanelDataset> {
        PanelDataset::from_parts(
            self.observations,
            self.unit_labels,
            self.cluster_labels,
            self.block_labels,
            self.covariate_names,
            self.has_test_in,
        )
    }
}

fn unit_histories(observations: &[Observation], n_units: usize) -> Vec<Vec<usize>> {
    let mut hist: Vec<Vec<usize>> = vec![Vec::new(); n_units];
    for (i, o) in observations.iter().enumerate() {
        hist[o.unit].push(i);
    }
    for h in &mut hist {
        h.sort_by_key(|&i| observations[i].year);
    }
    hist
}

/// Interns string identifiers while rows are collected.
#[derive(Debug, Default)]
pub struct PanelBuilder {
    observations: Vec<Observation>,
    units: Interner,
    clusters: Interner,
    blocks: Interner,
    covariate_names: Vec<String>,
    has_test_in: bool,
}

/// Row with string identifiers, as read from a tabular source.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow<'a> {
    pub unit: &'a str,
    pub cluster: &'a str,
    pub block: Option<&'a str>,
    pub treated: bool,
    pub cohort: i32,
    pub grade: i32,
    pub year: u32,
    pub outcome: f64,
    pub tested_in: bool,
    pub covariates: Vec<f64>,
}

impl PanelBuilder {
    pub fn new(covariate_names: Vec<String>, has_test_in: bool) -> Self {
        Self { covariate_names, has_test_in, ..Self::default() }
    }

    pub fn push(&mut self, row: RawRow<'_>) {
        let unit = self.units.intern(row.unit);
        let cluster = self.clusters.intern(row.cluster);
        let block = row.block.map(|b| self.blocks.intern(b));
        self.observations.push(Observation {
            unit,
            cluster,
            block,
            treated: row.treated,
            cohort: row.cohort,
            grade: row.grade,
            year: row.year,
            outcome: row.outcome,
            tested_in: row.tested_in,
            covariates: row.covariates,
        });
    }

    pub fn set_has_test_in(&mut self, v: bool) {
        self.has_test_in = v;
    }

    pub fn observations_mut(&mut self) -> &mut [Observation] {
        &mut self.observations
    }

    pub fn n_units(&self) -> usize {
        self.units.labels.len()
    }

    pub fn build(self) -> Result<PanelDataset> {
        PanelDataset::from_parts(
            self.observations,
            self.units.labels,
            self.clusters.labels,
            self.blocks.labels,
            self.covariate_names,
            self.has_test_in,
        )
    }
}

#[derive(Debug, Default)]
struct Interner {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(String::from(s));
        self.index.insert(String::from(s), i);
        i
    }
}

/// Per-grade cutoffs: a score strictly below the cutoff for the row's grade
/// flags the unit as tested in from that year on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestInRule {
    pub cutoffs: BTreeMap<i32, f64>,
    /// Start the flag one year after the first below-cutoff score.
    #[serde(default)]
    pub defer_one_year: bool,
}

impl TestInRule {
    pub fn cutoff(&self, grade: i32) -> Result<f64> {
        self.cutoffs
            .get(&grade)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no test-in cutoff for grade {grade}")))
    }

    /// Sets `tested_in` on every observation from `scores`, with persistence
    /// within unit. `scores[i]` belongs to `observations[i]`.
    pub fn apply(&self, observations: &mut [Observation], scores: &[f64], n_units: usize) -> Result<()> {
        if scores.len() != observations.len() {
            return Err(Error::Dimension("score vector length".into()));
        }
        let hist = unit_histories(observations, n_units);
        for rows in hist {
            let mut flagged = false;
            for i in rows {
                let below = scores[i] < self.cutoff(observations[i].grade)?;
                if self.defer_one_year {
                    observations[i].tested_in = flagged;
                    flagged |= below;
                } else {
                    flagged |= below;
                    observations[i].tested_in = flagged;
                }
            }
        }
        Ok(())
    }
}
