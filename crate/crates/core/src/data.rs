//! Trajectory data model, long-format CSV ingestion and state standardization.
//!
//! A dataset holds `n` trajectories of `T + 1` steps each. Every step carries a
//! `K`-dimensional state, a binary action and a real reward. Storage is flat and
//! row-major in `(trajectory, step, coordinate)` order.
//!
//! The CSV layout is one row per `(trajectory, step)`:
//!
//! ```text
//! traj_id,t,s_1,...,s_K,action,reward
//! ```
//!
//! Rows may arrive in any order; they are sorted by `(traj_id, t)` on load and
//! always written back in that order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Immutable, validated collection of equal-length trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    n: usize,
    steps: usize,
    k: usize,
    states: Vec<f64>,
    actions: Vec<u8>,
    rewards: Vec<f64>,
}

impl TrajectoryDataset {
    /// Builds a dataset from flat buffers laid out as `(i, t)` major.
    ///
    /// `states` has length `n * steps * k`; `actions` and `rewards` have length
    /// `n * steps`.
    pub fn new(
        n: usize,
        steps: usize,
        k: usize,
        states: Vec<f64>,
        actions: Vec<u8>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if n == 0 || steps == 0 || k == 0 {
            return Err(Error::Shape(format!(
                "need n >= 1, T + 1 >= 1 and K >= 1 (got n={n}, T+1={steps}, K={k})"
            )));
        }
        let cells = n * steps;
        if states.len() != cells * k || actions.len() != cells || rewards.len() != cells {
            return Err(Error::Shape(format!(
                "buffer lengths do not match n={n}, T+1={steps}, K={k}"
            )));
        }
        for cell in 0..cells {
            let row = cell + 1;
            if states[cell * k..(cell + 1) * k]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::Data {
                    row,
                    message: "non-finite state value".into(),
                });
            }
            if !rewards[cell].is_finite() {
                return Err(Error::Data {
                    row,
                    message: "non-finite reward".into(),
                });
            }
            if actions[cell] > 1 {
                return Err(Error::Data {
                    row,
                    message: format!("action {} not in {{0, 1}}", actions[cell]),
                });
            }
        }
        Ok(Self {
            n,
            steps,
            k,
            states,
            actions,
            rewards,
        })
    }

    /// Number of trajectories.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Steps per trajectory, `T + 1`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// State dimension.
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn state(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.steps + t) * self.k;
        &self.states[start..start + self.k]
    }

    #[inline]
    pub fn action(&self, i: usize, t: usize) -> u8 {
        self.actions[i * self.steps + t]
    }

    #[inline]
    pub fn reward(&self, i: usize, t: usize) -> f64 {
        self.rewards[i * self.steps + t]
    }

    /// Undiscounted return of trajectory `i`.
    pub fn trajectory_return(&self, i: usize) -> f64 {
        let base = i * self.steps;
        self.rewards[base..base + self.steps].iter().sum()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[u8] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Appends the trajectories of `other` after those of `self`.
    pub fn concat(&self, other: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        if self.steps != other.steps || self.k != other.k {
            return Err(Error::Shape(
                "cannot concatenate datasets of different shape".into(),
            ));
        }
        let mut states = self.states.clone();
        states.extend_from_slice(&other.states);
        let mut actions = self.actions.clone();
        actions.extend_from_slice(&other.actions);
        let mut rewards = self.rewards.clone();
        rewards.extend_from_slice(&other.rewards);
        TrajectoryDataset::new(
            self.n + other.n,
            self.steps,
            self.k,
            states,
            actions,
            rewards,
        )
    }

    /// Reorders trajectories; `order[j]` is the source index of output trajectory `j`.
    pub fn permuted(&self, order: &[usize]) -> Result<TrajectoryDataset> {
        let mut seen = vec![false; self.n];
        if order.len() != self.n {
            return Err(Error::Shape("permutation length differs from n".into()));
        }
        for &o in order {
            if o >= self.n || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Shape("not a permutation".into()));
            }
        }
        let (s, k) = (self.steps, self.k);
        let mut states = Vec::with_capacity(self.states.len());
        let mut actions = Vec::with_capacity(self.actions.len());
        let mut rewards = Vec::with_capacity(self.rewards.len());
        for &o in order {
            states.extend_from_slice(&self.states[o * s * k..(o + 1) * s * k]);
            actions.extend_from_slice(&self.actions[o * s..(o + 1) * s]);
            rewards.extend_from_slice(&self.rewards[o * s..(o + 1) * s]);
        }
        TrajectoryDataset::new(self.n, s, k, states, actions, rewards)
    }

    /// SHA-256 over shape and raw little-endian contents.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.n, self.steps, self.k] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.states {
            h.update(v.to_le_bytes());
        }
        h.update(&self.actions);
        for v in &self.rewards {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the dataset in the long CSV layout with `traj_id` numbered from 0.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((1..=self.k).map(|j| format!("s_{j}")));
        header.push("action".into());
        header.push("reward".into());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n {
            for t in 0..self.steps {
                record.clear();
                record.push(i.to_string());
                record.push(t.to_string());
                record.extend(self.state(i, t).iter().map(|v| v.to_string()));
                record.push(self.action(i, t).to_string());
                record.push(self.reward(i, t).to_string());
                w.write_record(&record)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Column names used when reading a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub traj_id: String,
    pub t: String,
    /// State columns are `<prefix>1`, `<prefix>2`, ... without gaps.
    pub state_prefix: String,
    pub action: String,
    pub reward: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            traj_id: "traj_id".into(),
            t: "t".into(),
            state_prefix: "s_".into(),
            action: "action".into(),
            reward: "reward".into(),
        }
    }
}

pub fn load_trajectories(path: &Path, schema: &ColumnSchema) -> Result<TrajectoryDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(std::io::BufReader::new(file), schema)
}

/// Parses a long-format trajectory CSV from any reader.
///
/// Row numbers in errors count data rows from 1 (the header is not counted).
pub fn read_trajectories<R: Read>(reader: R, schema: &ColumnSchema) -> Result<TrajectoryDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let id_col = find(&schema.traj_id)?;
    let t_col = find(&schema.t)?;
    let action_col = find(&schema.action)?;
    let reward_col = find(&schema.reward)?;

    let mut state_cols = Vec::new();
    while let Ok(c) = find(&format!("{}{}", schema.state_prefix, state_cols.len() + 1)) {
        state_cols.push(c);
    }
    let k = state_cols.len();
    if k == 0 {
        return Err(Error::Schema(format!(
            "missing state column `{}1`",
            schema.state_prefix
        )));
    }
    for h in headers.iter() {
        if let Some(rest) = h.trim().strip_prefix(&schema.state_prefix) {
            if let Ok(j) = rest.parse::<usize>() {
                if j == 0 || j > k {
                    return Err(Error::Schema(format!(
                        "state column `{h}` breaks the contiguous sequence 1..={k}"
                    )));
                }
            }
        }
    }

    // traj_id -> t -> (state, action, reward)
    type Cell = (Vec<f64>, u8, f64);
    let mut rows: BTreeMap<u64, BTreeMap<usize, Cell>> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Data {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let traj: u64 = field(id_col).parse().map_err(|_| Error::Data {
            row,
            message: format!("traj_id `{}` is not a non-negative integer", field(id_col)),
        })?;
        let t: usize = field(t_col).parse().map_err(|_| Error::Data {
            row,
            message: format!("t `{}` is not a non-negative integer", field(t_col)),
        })?;
        let number = |c: usize, what: &str| -> Result<f64> {
            let v: f64 = field(c).parse().map_err(|_| Error::Data {
                row,
                message: format!("{what} `{}` is not a number", field(c)),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row,
                    message: format!("{what} is not finite"),
                });
            }
            Ok(v)
        };
        let state = state_cols
            .iter()
            .enumerate()
            .map(|(j, &c)| number(c, &format!("s_{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let action = match number(action_col, "action")? {
            0.0 => 0u8,
            1.0 => 1u8,
            a => {
                return Err(Error::Data {
                    row,
                    message: format!("action {a} not in {{0, 1}}"),
                })
            }
        };
        let reward = number(reward_col, "reward")?;
        if rows
            .entry(traj)
            .or_default()
            .insert(t, (state, action, reward))
            .is_some()
        {
            return Err(Error::Data {
                row,
                message: format!("duplicate (traj_id, t) = ({traj}, {t})"),
            });
        }
    }

    let n = rows.len();
    let steps = rows
        .values()
        .next()
        .map(|r| r.len())
        .ok_or_else(|| Error::Shape("no data rows".into()))?;
    let mut states = Vec::with_capacity(n * steps * k);
    let mut actions = Vec::with_capacity(n * steps);
    let mut rewards = Vec::with_capacity(n * steps);
    for (traj, by_t) in &rows {
        if by_t.len() != steps {
            return Err(Error::Shape(format!(
                "trajectory {traj} has {} steps, expected {steps}",
                by_t.len()
            )));
        }
        for (expected, (t, (s, a, r))) in by_t.iter().enumerate() {
            if *t != expected {
                return Err(Error::Shape(format!(
                    "trajectory {traj} is missing step {expected}"
                )));
            }
            states.extend_from_slice(s);
            actions.push(*a);
            rewards.push(*r);
        }
    }
    TrajectoryDataset::new(n, steps, k, states, actions, rewards)
}

/// Per-dimension affine map applied by [`standardize_states`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Maps standardized states back to the original units.
    pub fn invert(&self, dataset: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        let k = dataset.k();
        if k != self.mean.len() {
            return Err(Error::Shape("standardization dimension mismatch".into()));
        }
        let states = dataset
            .states()
            .chunks_exact(k)
            .flat_map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(j, v)| v * self.scale[j] + self.mean[j])
            })
            .collect();
        TrajectoryDataset::new(
            dataset.n(),
            dataset.steps(),
            k,
            states,
            dataset.actions().to_vec(),
            dataset.rewards().to_vec(),
        )
    }
}

/// Centers and scales each state dimension to pooled mean 0 and standard
/// deviation 1 (population convention, pooled over all `(i, t)`).
pub fn standardize_states(
    dataset: &TrajectoryDataset,
) -> Result<(TrajectoryDataset, Standardization)> {
    let k = dataset.k();
    let count = (dataset.n() * dataset.steps()) as f64;
    let mut mean = vec![0.0; k];
    for s in dataset.states().chunks_exact(k) {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; k];
    for s in dataset.states().chunks_exact(k) {
        for j in 0..k {
            let d = s[j] - mean[j];
            var[j] += d * d;
        }
    }
    let mut scale = Vec::with_capacity(k);
    for (j, v) in var.iter().enumerate() {
        let sd = (v / count).sqrt();
        if sd <= f64::EPSILON * mean[j].abs().max(1.0) {
            return Err(Error::DegenerateCovariate { dim: j + 1 });
        }
        scale.push(sd);
    }
    let states = dataset
        .states()
        .chunks_exact(k)
        .flat_map(|s| {
            s.iter()
                .enumerate()
                .map(|(j, v)| (v - mean[j]) / scale[j])
                .collect::<Vec<_>>()
        })
        .collect();
    let out = TrajectoryDataset::new(
        dataset.n(),
        dataset.steps(),
        k,
        states,
        dataset.actions().to_vec(),
        dataset.rewards().to_vec(),
    )?;
    Ok((out, Standardization { mean, scale }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "traj_id,t,s_1,s_2,action,reward
0,0,0.1,0.2,1,-0.2
0,1,0.3,-0.4,0,0
0,2,0.5,0.6,1,-0.6
1,0,-0.1,1.2,0,0
1,1,0.0,0.0,1,0
1,2,2.5,-1.5,1,1.5
";

    fn parse(text: &str) -> Result<TrajectoryDataset> {
        read_trajectories(text.as_bytes(), &ColumnSchema::default())
    }

    #[test]
    fn loads_well_formed_file() {
        let d = parse(SMALL).unwrap();
        assert_eq!((d.n(), d.steps(), d.k()), (2, 3, 2));
        assert_eq!(d.state(1, 2), &[2.5, -1.5]);
        assert_eq!(d.action(0, 1), 0);
        assert_eq!(d.reward(1, 2), 1.5);
    }

    #[test]
    fn sorts_rows_by_trajectory_then_step() {
        let mut lines: Vec<&str> = SMALL.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        assert_eq!(parse(&shuffled).unwrap(), parse(SMALL).unwrap());
    }

    #[test]
    fn bad_action_cites_row() {
        let text = SMALL.replacen("1,1,0.0,0.0,1,0", "1,1,0.0,0.0,2,0", 1);
        match parse(&text) {
            Err(Error::Data { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = SMALL.replace("reward", "rwd");
        assert!(matches!(parse(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn non_finite_value_is_data_error() {
        let text = SMALL.replacen("0.3,-0.4", "NaN,-0.4", 1);
        assert!(matches!(parse(&text), Err(Error::Data { row: 2, .. })));
        let text = SMALL.replacen("-0.6", "inf", 1);
        assert!(matches!(parse(&text), Err(Error::Data { row: 3, .. })));
    }

    #[test]
    fn ragged_trajectories_rejected() {
        let text = SMALL.replacen("1,2,2.5,-1.5,1,1.5\n", "", 1);
        assert!(matches!(parse(&text), Err(Error::Shape(_))));
        let gap = SMALL.replacen("0,1,0.3", "0,7,0.3", 1);
        assert!(matches!(parse(&gap), Err(Error::Shape(_))));
    }

    #[test]
    fn remapped_schema() {
        let text = SMALL
            .replace("traj_id", "patient")
            .replace("s_1", "x1")
            .replace("s_2", "x2");
        let schema = ColumnSchema {
            traj_id: "patient".into(),
            state_prefix: "x".into(),
            ..ColumnSchema::default()
        };
        let d = read_trajectories(text.as_bytes(), &schema).unwrap();
        assert_eq!(d, parse(SMALL).unwrap());
    }

    #[test]
    fn two_point_standardization() {
        let d =
            TrajectoryDataset::new(1, 2, 1, vec![1.0, 3.0], vec![0, 1], vec![0.0, 0.0]).unwrap();
        let (z, tr) = standardize_states(&d).unwrap();
        assert_eq!(tr.mean, vec![2.0]);
        assert_eq!(tr.scale, vec![1.0]);
        assert_eq!(z.states(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardization_is_idempotent() {
        let d = parse(SMALL).unwrap();
        let (z, _) = standardize_states(&d).unwrap();
        let (zz, tr) = standardize_states(&z).unwrap();
        for (a, b) in z.states().iter().zip(zz.states()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for j in 0..2 {
            assert!(tr.mean[j].abs() <= 1e-12);
            assert!((tr.scale[j] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_covariate_rejected() {
        let d = TrajectoryDataset::new(
            2,
            1,
            2,
            vec![1.0, 5.0, 2.0, 5.0],
            vec![0, 1],
            vec![0.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            standardize_states(&d),
            Err(Error::DegenerateCovariate { dim: 2 })
        ));
    }

    #[test]
    fn concat_and_permute() {
        let d = parse(SMALL).unwrap();
        let dd = d.concat(&d).unwrap();
        assert_eq!(dd.n(), 4);
        assert_eq!(dd.state(3, 2), d.state(1, 2));
        let p = d.permuted(&[1, 0]).unwrap();
        assert_eq!(p.state(0, 2), d.state(1, 2));
        assert!(d.permuted(&[0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn malformed_csv_never_panics(text in "[a-z_0-9,.\\-\n]{0,200}") {
                let header = "traj_id,t,s_1,action,reward\n";
                let _ = parse(&format!("{header}{text}"));
                let _ = parse(&text);
            }

            #[test]
            fn accepted_datasets_satisfy_invariants(
                rows in proptest::collection::vec(
                    (0u64..3, 0usize..3, -5.0f64..5.0, 0u8..3, -2.0f64..2.0), 1..12)
            ) {
                let mut text = String::from("traj_id,t,s_1,action,reward\n");
                for (id, t, s, a, r) in &rows {
                    text.push_str(&format!("{id},{t},{s},{a},{r}\n"));
                }
                if let Ok(d) = parse(&text) {
                    prop_assert!(d.n() >= 1 && d.steps() >= 1 && d.k() == 1);
                    prop_assert!(d.actions().iter().all(|&a| a <= 1));
                    prop_assert!(d.states().iter().all(|v| v.is_finite()));
                    prop_assert_eq!(d.states().len(), d.n() * d.steps());
                }
            }

            #[test]
            fn standardize_inverse_roundtrip(
                vals in proptest::collection::vec(-100.0f64..100.0, 8)
            ) {
                let d = TrajectoryDataset::new(2, 2, 2, vals, vec![0, 1, 1, 0], vec![0.0; 4]).unwrap();
                if let Ok((z, tr)) = standardize_states(&d) {
                    let back = tr.invert(&z).unwrap();
                    for (a, b) in back.states().iter().zip(d.states()) {
                        prop_assert!((a - b).abs() <= 1e-10);
                    }
                }
            }
        }
    }
}
