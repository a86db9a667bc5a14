//! Model configuration, cluster structure and design matrices.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::{Family, Link};
use crate::linalg::numerical_rank;

pub const RANK_TOL: f64 = 1e-10;

/// One response and its conditional model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub response: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<Link>,
    /// Covariate columns; an intercept is always prepended.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Trial counts (binomial only). Without it responses are 0/1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<String>,
    /// Known dispersion; λ is estimated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<f64>,
}

impl MarginalSpec {
    pub fn new(response: &str, family: Family) -> Self {
        Self {
            response: response.to_string(),
            family,
            link: None,
            covariates: Vec::new(),
            trials: None,
            dispersion: None,
        }
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = Some(link);
        self
    }

    pub fn with_covariates(mut self, cols: &[&str]) -> Self {
        self.covariates = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn link(&self) -> Link {
        self.link.unwrap_or_else(|| self.family.canonical_link())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested_in: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RandomDist {
    #[default]
    Gaussian,
    StudentT { dof: f64 },
}

/// The full model: d marginals sharing one cluster structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub marginals: Vec<MarginalSpec>,
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub random_dist: RandomDist,
}

impl ModelSpec {
    pub fn new(marginals: Vec<MarginalSpec>, clusters: Vec<ClusterSpec>) -> Result<Self> {
        let spec = Self { marginals, clusters, random_dist: RandomDist::Gaussian };
        spec.check()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Consistency checks that need no data.
    pub fn check(&self) -> Result<()> {
        if self.marginals.is_empty() {
            return Err(Error::config("at least one marginal is required"));
        }
        if self.clusters.is_empty() {
            return Err(Error::config("at least one cluster component is required"));
        }
        for m in &self.marginals {
            let link = m.link();
            if !m.family.supports_link(link) {
                return Err(Error::config(format!(
                    "link '{link}' is not valid for family '{}' (response '{}')",
                    m.family, m.response
                )));
            }
            if m.trials.is_some() && m.family != Family::Binomial {
                return Err(Error::config(format!("trials given for non-binomial response '{}'", m.response)));
            }
            if let Some(l) = m.dispersion {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(Error::config(format!("dispersion for '{}' must be positive", m.response)));
                }
                if m.family.dispersion_fixed() && l != 1.0 {
                    return Err(Error::config(format!(
                        "family '{}' has dispersion fixed at 1 (response '{}')",
                        m.family, m.response
                    )));
                }
            }
        }
        let mut names = HashMap::new();
        for (i, c) in self.clusters.iter().enumerate() {
            if names.insert(c.name.as_str(), i).is_some() {
                return Err(Error::config(format!("duplicate cluster component '{}'", c.name)));
            }
        }
        for c in &self.clusters {
            if let Some(p) = &c.nested_in {
                if !names.contains_key(p.as_str()) {
                    return Err(Error::config(format!("component '{}' nested in unknown '{p}'", c.name)));
                }
            }
        }
        // Reject cycles in the nesting relation.
        for start in 0..self.clusters.len() {
            let mut cur = start;
            for _ in 0..=self.clusters.len() {
                match &self.clusters[cur].nested_in {
                    Some(p) => cur = names[p.as_str()],
                    None => break,
                }
                if cur == start {
                    return Err(Error::config(format!("nesting cycle through '{}'", self.clusters[start].name)));
                }
            }
        }
        if let RandomDist::StudentT { dof } = self.random_dist {
            if !(dof > 4.0) {
                return Err(Error::config(format!("student-t random components need dof > 4, got {dof}")));
            }
        }
        if self.dim() > 1 && self.clusters.len() > 1 {
            return Err(Error::Unsupported(
                "multivariate models take a single cluster component".into(),
            ));
        }
        Ok(())
    }
}

/// Observation-to-cluster allocation for one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterComponent {
    pub name: String,
    pub index: Vec<usize>,
    pub labels: Vec<String>,
    pub n_clusters: usize,
}

impl ClusterComponent {
    /// Clusters numbered in order of first appearance.
    pub fn from_labels(name: &str, labels: &[String]) -> Self {
        let mut map: HashMap<&str, usize> = HashMap::new();
        let mut uniq = Vec::new();
        let index = labels
            .iter()
            .map(|l| {
                *map.entry(l.as_str()).or_insert_with(|| {
                    uniq.push(l.clone());
                    uniq.len() - 1
                })
            })
            .collect();
        Self { name: name.to_string(), index, n_clusters: uniq.len(), labels: uniq }
    }

    pub fn from_indices(name: &str, index: Vec<usize>, n_clusters: usize) -> Self {
        Self {
            name: name.to_string(),
            index,
            labels: (0..n_clusters).map(|j| (j + 1).to_string()).collect(),
            n_clusters,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters];
        for &j in &self.index {
            s[j] += 1;
        }
        s
    }

    /// Observation indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters];
        for (i, &j) in self.index.iter().enumerate() {
            m[j].push(i);
        }
        m
    }

    /// n × q 0/1 allocation matrix.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.index.len(), self.n_clusters);
        for (i, &j) in self.index.iter().enumerate() {
            z[(i, j)] = 1.0;
        }
        z
    }
}

/// Child-to-parent cluster map.
#[derive(Debug, Clone, PartialEq)]
pub struct Nesting {
    pub child: usize,
    pub parent: usize,
    pub map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterStructure {
    pub components: Vec<ClusterComponent>,
    pub nesting: Vec<Nesting>,
}

impl ClusterStructure {
    pub fn single(component: ClusterComponent) -> Self {
        Self { components: vec![component], nesting: Vec::new() }
    }

    pub fn parent_of(&self, child: usize) -> Option<&Nesting> {
        self.nesting.iter().find(|n| n.child == child)
    }

    pub fn is_parent(&self, comp: usize) -> bool {
        self.nesting.iter().any(|n| n.parent == comp)
    }

    /// Components entering the conditional fit: everything that is not a
    /// nesting parent.
    pub fn active(&self) -> Vec<usize> {
        (0..self.components.len()).filter(|&r| !self.is_parent(r)).collect()
    }

    /// Build the child-to-parent map, failing if a child cluster has
    /// observations in more than one parent cluster.
    pub fn nest(&mut self, child: usize, parent: usize) -> std::result::Result<(), Vec<(usize, Vec<usize>)>> {
        let c = &self.components[child];
        let p = &self.components[parent];
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); c.n_clusters];
        for (&ci, &pi) in c.index.iter().zip(&p.index) {
            if !parents[ci].contains(&pi) {
                parents[ci].push(pi);
            }
        }
        let bad: Vec<(usize, Vec<usize>)> = parents
            .iter()
            .enumerate()
            .filter(|(_, ps)| ps.len() > 1)
            .map(|(j, ps)| (j, ps.clone()))
            .collect();
        if !bad.is_empty() {
            return Err(bad);
        }
        let map = parents.iter().map(|ps| ps.first().copied().unwrap_or(0)).collect();
        self.nesting.push(Nesting { child, parent, map });
        Ok(())
    }
}

/// One marginal's response, prior weights and fixed-effects matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDesign {
    pub name: String,
    pub family: Family,
    pub link: Link,
    pub y: DVector<f64>,
    pub weights: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub dispersion: Option<f64>,
}

impl MarginalDesign {
    pub fn new(name: &str, family: Family, link: Link, y: DVector<f64>, x: DMatrix<f64>) -> Self {
        let n = y.len();
        let x_names = (0..x.ncols())
            .map(|c| if c == 0 { "(intercept)".to_string() } else { format!("x{c}") })
            .collect();
        Self {
            name: name.to_string(),
            family,
            link,
            y,
            weights: DVector::from_element(n, 1.0),
            x,
            x_names,
            dispersion: None,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn lambda_fixed(&self) -> Option<f64> {
        if self.family.dispersion_fixed() {
            Some(1.0)
        } else {
            self.dispersion
        }
    }
}

/// Everything the estimators need, built from a model and a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub marginals: Vec<MarginalDesign>,
    pub clusters: ClusterStructure,
    pub random_dist: RandomDist,
}

impl Design {
    pub fn new(marginals: Vec<MarginalDesign>, clusters: ClusterStructure) -> Self {
        Self { marginals, clusters, random_dist: RandomDist::Gaussian }
    }

    /// Validates, then builds. Any issue in the report blocks construction.
    pub fn build(model: &ModelSpec, data: &Dataset) -> Result<Self> {
        model.check()?;
        let report = validate(model, data);
        if !report.is_ok() {
            return Err(Error::Validation(report.to_string()));
        }
        let (xs, _) = build_matrices(model, data)?;
        let clusters = cluster_structure(model, data).map_err(|_| Error::Validation(report.to_string()))?;
        let mut marginals = Vec::with_capacity(model.dim());
        for (m, x) in model.marginals.iter().zip(xs) {
            let (y, weights) = response(m, data)?;
            let mut x_names = vec!["(intercept)".to_string()];
            x_names.extend(m.covariates.iter().cloned());
            marginals.push(MarginalDesign {
                name: m.response.clone(),
                family: m.family,
                link: m.link(),
                y,
                weights,
                x,
                x_names,
                dispersion: m.dispersion,
            });
        }
        Ok(Self { marginals, clusters, random_dist: model.random_dist })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn n(&self) -> usize {
        self.marginals[0].n()
    }
}

fn response(m: &MarginalSpec, data: &Dataset) -> Result<(DVector<f64>, DVector<f64>)> {
    let raw = data.numeric(&m.response)?;
    let weights = match &m.trials {
        Some(t) => data.numeric(t)?.to_vec(),
        None => vec![1.0; raw.len()],
    };
    let y = if m.family == Family::Binomial {
        raw.iter().zip(&weights).map(|(s, w)| if *w > 0.0 { s / w } else { f64::NAN }).collect()
    } else {
        raw.to_vec()
    };
    Ok((DVector::from_vec(y), DVector::from_vec(weights)))
}

fn cluster_structure(model: &ModelSpec, data: &Dataset) -> std::result::Result<ClusterStructure, Vec<Issue>> {
    let mut cs = ClusterStructure::default();
    let mut issues = Vec::new();
    for c in &model.clusters {
        match data.labels(&c.column) {
            Ok(labels) => cs.components.push(ClusterComponent::from_labels(&c.name, labels)),
            Err(_) => issues.push(Issue::MissingColumn(c.column.clone())),
        }
    }
    if !issues.is_empty() {
        return Err(issues);
    }
    for (r, c) in model.clusters.iter().enumerate() {
        if let Some(p) = &c.nested_in {
            let s = model.clusters.iter().position(|o| &o.name == p).expect("checked");
            if let Err(bad) = cs.nest(r, s) {
                for (cluster, parents) in bad {
                    issues.push(Issue::InconsistentNesting {
                        child: c.name.clone(),
                        cluster: cs.components[r].labels[cluster].clone(),
                        parents: parents.iter().map(|&p| cs.components[s].labels[p].clone()).collect(),
                    });
                }
            }
        }
    }
    if issues.is_empty() {
        Ok(cs)
    } else {
        Err(issues)
    }
}

/// Fixed-effects matrices (intercept first, then covariates in declared
/// order) and allocation matrices per component.
pub fn build_matrices(model: &ModelSpec, data: &Dataset) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let n = data.n_rows();
    let mut xs = Vec::with_capacity(model.dim());
    for m in &model.marginals {
        let mut x = DMatrix::from_element(n, m.covariates.len() + 1, 1.0);
        for (c, name) in m.covariates.iter().enumerate() {
            let col = data.numeric(name)?;
            x.column_mut(c + 1).copy_from_slice(col);
        }
        xs.push(x);
    }
    let mut zs = Vec::with_capacity(model.clusters.len());
    for c in &model.clusters {
        let comp = ClusterComponent::from_labels(&c.name, data.labels(&c.column)?);
        zs.push(comp.z_matrix());
    }
    Ok((xs, zs))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    MissingColumn(String),
    NonNumeric(String),
    RankDeficientX { marginal: String, rank: usize, columns: usize },
    RankDeficientZ { component: String, rank: usize, columns: usize },
    SupportViolation { marginal: String, row: usize, value: f64 },
    EmptyCluster { component: String, cluster: String },
    InconsistentNesting { child: String, cluster: String, parents: Vec<String> },
    NoObservations,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::MissingColumn(c) => write!(f, "missing column '{c}'"),
            Issue::NonNumeric(c) => write!(f, "column '{c}' is not numeric"),
            Issue::RankDeficientX { marginal, rank, columns } => {
                write!(f, "design for '{marginal}' has rank {rank} < {columns} columns")
            }
            Issue::RankDeficientZ { component, rank, columns } => {
                write!(f, "allocation for '{component}' has rank {rank} < {columns} clusters")
            }
            Issue::SupportViolation { marginal, row, value } => {
                write!(f, "response '{marginal}' row {row}: value {value} outside the support")
            }
            Issue::EmptyCluster { component, cluster } => write!(f, "cluster '{cluster}' of '{component}' is empty"),
            Issue::InconsistentNesting { child, cluster, parents } => {
                write!(f, "cluster '{cluster}' of '{child}' maps to several parents: {}", parents.join(", "))
            }
            Issue::NoObservations => write!(f, "dataset has no rows"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    /// (marginal, rank, columns)
    pub x_ranks: Vec<(String, usize, usize)>,
    /// (component, rank, clusters)
    pub z_ranks: Vec<(String, usize, usize)>,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r, k) in &self.x_ranks {
            writeln!(f, "X[{name}]: rank {r} of {k}")?;
        }
        for (name, r, q) in &self.z_ranks {
            writeln!(f, "Z[{name}]: rank {r} of {q}")?;
        }
        for issue in &self.issues {
            writeln!(f, "issue: {issue}")?;
        }
        Ok(())
    }
}

/// Check the data against the model. Never fails; problems go in the report.
pub fn validate(model: &ModelSpec, data: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if data.n_rows() == 0 {
        report.issues.push(Issue::NoObservations);
        return report;
    }
    let need_numeric = |name: &str, issues: &mut Vec<Issue>| match data.column(name) {
        None => {
            issues.push(Issue::MissingColumn(name.to_string()));
            false
        }
        Some(c) if c.numeric.is_none() => {
            issues.push(Issue::NonNumeric(name.to_string()));
            false
        }
        Some(_) => true,
    };
    let mut columns_ok = true;
    for m in &model.marginals {
        columns_ok &= need_numeric(&m.response, &mut report.issues);
        for c in &m.covariates {
            columns_ok &= need_numeric(c, &mut report.issues);
        }
        if let Some(t) = &m.trials {
            columns_ok &= need_numeric(t, &mut report.issues);
        }
    }
    let cs = match cluster_structure(model, data) {
        Ok(cs) => Some(cs),
        Err(issues) => {
            report.issues.extend(issues);
            None
        }
    };
    if !columns_ok {
        return report;
    }
    let Ok((xs, _)) = build_matrices(model, data) else {
        return report;
    };
    for (m, x) in model.marginals.iter().zip(&xs) {
        let rank = numerical_rank(x, RANK_TOL);
        report.x_ranks.push((m.response.clone(), rank, x.ncols()));
        if rank < x.ncols() {
            report.issues.push(Issue::RankDeficientX { marginal: m.response.clone(), rank, columns: x.ncols() });
        }
        let (y, w) = response(m, data).expect("columns checked");
        for (i, (&yi, &wi)) in y.iter().zip(w.iter()).enumerate() {
            let ok = wi > 0.0 && m.family.in_support(yi, wi) && (m.trials.is_none() || wi == wi.trunc());
            if !ok {
                let raw = data.numeric(&m.response).expect("checked")[i];
                report.issues.push(Issue::SupportViolation { marginal: m.response.clone(), row: i + 1, value: raw });
            }
        }
    }
    if let Some(cs) = cs {
        for comp in &cs.components {
            // rank(Z) = rank(ZᵀZ), and ZᵀZ is the diagonal of cluster sizes.
            let sizes = comp.sizes();
            let ztz = DMatrix::from_diagonal(&DVector::from_iterator(sizes.len(), sizes.iter().map(|&s| s as f64)));
            let rank = numerical_rank(&ztz, RANK_TOL);
            report.z_ranks.push((comp.name.clone(), rank, comp.n_clusters));
            for (j, &s) in sizes.iter().enumerate() {
                if s == 0 {
                    report.issues.push(Issue::EmptyCluster { component: comp.name.clone(), cluster: comp.labels[j].clone() });
                }
            }
            if rank < comp.n_clusters && sizes.iter().all(|&s| s > 0) {
                report.issues.push(Issue::RankDeficientZ { component: comp.name.clone(), rank, columns: comp.n_clusters });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new()
            .with_numeric("y", vec![1.0, 2.0, 0.0, 4.0])
            .unwrap()
            .with_numeric("x1", vec![0.5, -1.0, 2.0, 0.1])
            .unwrap()
            .with_numeric("x2", vec![1.0, 1.0, 3.0, 2.0])
            .unwrap()
            .with_labels("g", &["A", "A", "B", "B"])
            .unwrap()
    }

    fn spec(family: Family, covs: &[&str]) -> ModelSpec {
        ModelSpec::new(
            vec![MarginalSpec::new("y", family).with_covariates(covs)],
            vec![ClusterSpec { name: "g".into(), column: "g".into(), nested_in: None }],
        )
        .unwrap()
    }

    #[test]
    fn allocation_matrix_from_labels() {
        let labels: Vec<String> = ["A", "A", "B"].iter().map(|s| s.to_string()).collect();
        let z = ClusterComponent::from_labels("g", &labels).z_matrix();
        assert_eq!(z, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn design_has_intercept_then_declared_covariates() {
        let (xs, zs) = build_matrices(&spec(Family::Normal, &["x2", "x1"]), &toy()).unwrap();
        assert_eq!(xs[0].column(0).iter().copied().collect::<Vec<_>>(), vec![1.0; 4]);
        assert_eq!(xs[0].column(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 3.0, 2.0]);
        assert_eq!(xs[0].column(2).iter().copied().collect::<Vec<_>>(), vec![0.5, -1.0, 2.0, 0.1]);
        for row in zs[0].row_iter() {
            assert_eq!(row.sum(), 1.0);
        }
        let (xs2, zs2) = build_matrices(&spec(Family::Normal, &["x2", "x1"]), &toy()).unwrap();
        assert_eq!(xs, xs2);
        assert_eq!(zs, zs2);
    }

    #[test]
    fn duplicated_covariate_is_rank_deficient() {
        let data = toy().with_numeric("x1b", vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let r = validate(&spec(Family::Normal, &["x1", "x1b"]), &data);
        assert!(r.issues.iter().any(|i| matches!(i, Issue::RankDeficientX { rank: 2, columns: 3, .. })));
        assert!(Design::build(&spec(Family::Normal, &["x1", "x1b"]), &data).is_err());
    }

    #[test]
    fn negative_poisson_count_flagged() {
        let data = Dataset::new()
            .with_numeric("y", vec![1.0, -1.0, 3.0])
            .unwrap()
            .with_labels("g", &[1, 1, 2])
            .unwrap();
        let r = validate(&spec(Family::Poisson, &[]), &data);
        assert_eq!(r.issues, vec![Issue::SupportViolation { marginal: "y".into(), row: 2, value: -1.0 }]);
    }

    #[test]
    fn inconsistent_nesting_flagged() {
        let data = Dataset::new()
            .with_numeric("y", vec![1.0; 6])
            .unwrap()
            .with_labels("child", &[1, 2, 3, 3, 4, 4])
            .unwrap()
            .with_labels("parent", &["a", "a", "a", "b", "b", "b"])
            .unwrap();
        let model = ModelSpec::new(
            vec![MarginalSpec::new("y", Family::Normal)],
            vec![
                ClusterSpec { name: "child".into(), column: "child".into(), nested_in: Some("parent".into()) },
                ClusterSpec { name: "parent".into(), column: "parent".into(), nested_in: None },
            ],
        )
        .unwrap();
        let r = validate(&model, &data);
        assert_eq!(
            r.issues,
            vec![Issue::InconsistentNesting { child: "child".into(), cluster: "3".into(), parents: vec!["a".into(), "b".into()] }]
        );
    }

    #[test]
    fn nesting_composes_allocations() {
        let mut cs = ClusterStructure::default();
        cs.components.push(ClusterComponent::from_indices("c", vec![0, 0, 1, 2, 3, 3], 4));
        cs.components.push(ClusterComponent::from_indices("p", vec![0, 0, 0, 1, 1, 1], 2));
        cs.nest(0, 1).unwrap();
        let n = &cs.nesting[0];
        let mut ind = DMatrix::zeros(4, 2);
        for (c, &p) in n.map.iter().enumerate() {
            ind[(c, p)] = 1.0;
        }
        assert_eq!(cs.components[0].z_matrix() * ind, cs.components[1].z_matrix());
        assert_eq!(cs.active(), vec![0]);
    }

    #[test]
    fn missing_and_text_columns_reported() {
        let r = validate(&spec(Family::Normal, &["nope"]), &toy());
        assert!(r.issues.contains(&Issue::MissingColumn("nope".into())));
        let data = toy().with_labels("txt", &["a", "b", "c", "d"]).unwrap();
        let r = validate(&spec(Family::Normal, &["txt"]), &data);
        assert!(r.issues.contains(&Issue::NonNumeric("txt".into())));
    }

    #[test]
    fn empty_cluster_detected_on_explicit_structure() {
        let comp = ClusterComponent::from_indices("g", vec![0, 0, 2], 3);
        assert_eq!(comp.sizes(), vec![2, 0, 1]);
    }

    #[test]
    fn config_json_round_trip_and_checks() {
        let text = r#"{
            "marginals": [
                {"response": "y1", "family": "normal", "link": "identity", "covariates": ["x"]},
                {"response": "y2", "family": "poisson", "link": "log"}
            ],
            "clusters": [{"name": "cluster", "column": "g"}],
            "random_dist": {"type": "student_t", "dof": 6}
        }"#;
        let m = ModelSpec::from_json(text).unwrap();
        assert_eq!(m.random_dist, RandomDist::StudentT { dof: 6.0 });
        let echo = serde_json::to_string(&m).unwrap();
        assert_eq!(ModelSpec::from_json(&echo).unwrap(), m);

        let bad_link = text.replace("\"link\": \"log\"", "\"link\": \"logit\"");
        assert!(matches!(ModelSpec::from_json(&bad_link), Err(Error::Config(_))));
        let bad_dof = text.replace("\"dof\": 6", "\"dof\": 3");
        assert!(ModelSpec::from_json(&bad_dof).is_err());
    }

    #[test]
    fn binomial_uses_proportions() {
        let data = Dataset::new()
            .with_numeric("s", vec![1.0, 3.0])
            .unwrap()
            .with_numeric("m", vec![4.0, 3.0])
            .unwrap()
            .with_labels("g", &[1, 2])
            .unwrap();
        let mut ms = MarginalSpec::new("s", Family::Binomial);
        ms.trials = Some("m".into());
        let model = ModelSpec::new(vec![ms], vec![ClusterSpec { name: "g".into(), column: "g".into(), nested_in: None }]).unwrap();
        let d = Design::build(&model, &data).unwrap();
        assert_eq!(d.marginals[0].y.as_slice(), &[0.25, 1.0]);
        assert_eq!(d.marginals[0].weights.as_slice(), &[4.0, 3.0]);
    }
}
