use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Idx, Label, Prediction, ToolId};
use crate::util::keyed_rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplingError {
    #[error("first-level tool set is empty")]
    EmptyT1,
    #[error("reaction {0} has no label")]
    MissingLabel(Idx),
    #[error("empty N schedule")]
    EmptySchedule,
}

/// Validation reactions where the first-level tools are not unanimous on a
/// non-NA value.
pub fn disagreement_set(dataset: &Dataset, t1_tools: &[ToolId]) -> Result<BTreeSet<Idx>, SamplingError> {
    if t1_tools.is_empty() {
        return Err(SamplingError::EmptyT1);
    }
    let preds = |idx| t1_tools.iter().map(move |t| dataset.prediction(t, idx));
    Ok(dataset
        .reactions
        .iter()
        .filter(|r| {
            let first = dataset.prediction(&t1_tools[0], r.idx);
            first.is_na() || preds(r.idx).any(|p| p != first)
        })
        .map(|r| r.idx)
        .collect())
}

/// `R11` holds label 1 / prediction 1, `R10` label 1 / prediction 0, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cell {
    R11,
    R10,
    R01,
    R00,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::R11, Cell::R10, Cell::R01, Cell::R00];

    /// NA lands in the wrong-prediction cell for its label.
    pub fn of(label: Label, prediction: Prediction) -> Cell {
        let predicted = prediction.label().unwrap_or(label.flip());
        match (label, predicted) {
            (Label::Feasible, Label::Feasible) => Cell::R11,
            (Label::Feasible, Label::Infeasible) => Cell::R10,
            (Label::Infeasible, Label::Feasible) => Cell::R01,
            (Label::Infeasible, Label::Infeasible) => Cell::R00,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cell::R11 => "r11",
            Cell::R10 => "r10",
            Cell::R01 => "r01",
            Cell::R00 => "r00",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticSubset {
    pub tool_id: ToolId,
    /// 1-based.
    pub subset_no: usize,
    pub n: usize,
    /// Indexed by [`Cell::ALL`] order.
    pub cells: [Vec<Idx>; 4],
}

impl DiagnosticSubset {
    pub fn cell(&self, cell: Cell) -> &[Idx] {
        &self.cells[cell.slot()]
    }

    pub fn members(&self) -> impl Iterator<Item = Idx> + '_ {
        self.cells.iter().flatten().copied()
    }

    pub fn contains(&self, idx: Idx) -> bool {
        self.cells.iter().any(|c| c.contains(&idx))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("subset {subset_no} of {tool_id}: cell {cell} has {have} reactions, needs {need}")]
pub struct InsufficientCell {
    pub tool_id: ToolId,
    pub subset_no: usize,
    pub cell: Cell,
    pub have: usize,
    pub need: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplingReport {
    pub subsets: Vec<DiagnosticSubset>,
    pub skipped: Vec<InsufficientCell>,
}

/// Draws `m_total` four-cell subsets for one tool. Subset `m` uses
/// `n_schedule[(m - 1) % len]` reactions per cell, sampled without
/// replacement from an RNG keyed on `(seed, tool, m)`.
pub fn sample_diagnostic_subsets(
    dataset: &Dataset,
    tool: &str,
    pool: &BTreeSet<Idx>,
    m_total: usize,
    n_schedule: &[usize],
    seed: u64,
) -> Result<SamplingReport, SamplingError> {
    if n_schedule.is_empty() {
        return Err(SamplingError::EmptySchedule);
    }
    let mut population: [Vec<Idx>; 4] = Default::default();
    for &idx in pool {
        let label = dataset.label(idx).ok_or(SamplingError::MissingLabel(idx))?;
        population[Cell::of(label, dataset.prediction(tool, idx)).slot()].push(idx);
    }

    let mut report = SamplingReport::default();
    for m in 1..=m_total {
        let n = n_schedule[(m - 1) % n_schedule.len()];
        let short = Cell::ALL.into_iter().find(|c| population[c.slot()].len() < n);
        if let Some(cell) = short {
            let skip = InsufficientCell {
                tool_id: tool.to_string(),
                subset_no: m,
                cell,
                have: population[cell.slot()].len(),
                need: n,
            };
            log::warn!("{skip}; skipped");
            report.skipped.push(skip);
            continue;
        }
        let mut rng = keyed_rng(&[&seed.to_le_bytes(), tool.as_bytes(), &(m as u64).to_le_bytes()]);
        let cells = Cell::ALL.map(|c| population[c.slot()].choose_multiple(&mut rng, n).copied().collect());
        report.subsets.push(DiagnosticSubset { tool_id: tool.to_string(), subset_no: m, n, cells });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Reaction, Split};
    use proptest::prelude::*;

    fn dataset(rows: &[(u8, Prediction)]) -> Dataset {
        let reactions = (0..rows.len()).map(|i| Reaction::new(i as Idx, "C", "O", Label::from_int(rows[i].0 as i64))).collect();
        let mut ds = Dataset::new(Split::Validation, reactions).unwrap();
        ds.set_column("t", rows.iter().enumerate().map(|(i, r)| (i as Idx, r.1)).collect());
        ds
    }

    #[test]
    fn consensus_rules_for_pool() {
        use Prediction::*;
        let mut ds = dataset(&[(1, NA), (1, NA), (1, NA)]);
        ds.set_column("a", [(0, Pred1), (1, Pred1), (2, Pred1)].into());
        ds.set_column("b", [(0, Pred1), (1, Pred1), (2, Pred0)].into());
        ds.set_column("c", [(0, Pred1), (1, NA), (2, Pred1)].into());
        let t1: Vec<ToolId> = vec!["a".into(), "b".into(), "c".into()];
        assert_eq!(disagreement_set(&ds, &t1).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(disagreement_set(&ds, &[]), Err(SamplingError::EmptyT1));
    }

    #[test]
    fn na_goes_to_wrong_cell() {
        assert_eq!(Cell::of(Label::Feasible, Prediction::NA), Cell::R10);
        assert_eq!(Cell::of(Label::Infeasible, Prediction::NA), Cell::R01);
        assert_eq!(Cell::of(Label::Infeasible, Prediction::Pred0), Cell::R00);
    }

    fn balanced(n_each: usize) -> Dataset {
        use Prediction::*;
        let mut rows = Vec::new();
        for (l, p) in [(1, Pred1), (1, Pred0), (0, Pred1), (0, Pred0)] {
            rows.extend(std::iter::repeat((l, p)).take(n_each));
        }
        dataset(&rows)
    }

    #[test]
    fn schedule_cycles_and_is_deterministic() {
        let ds = balanced(50);
        let pool: BTreeSet<Idx> = ds.reactions.iter().map(|r| r.idx).collect();
        let a = sample_diagnostic_subsets(&ds, "t", &pool, 100, &[5, 10, 25, 45], 7).unwrap();
        let b = sample_diagnostic_subsets(&ds, "t", &pool, 100, &[5, 10, 25, 45], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.subsets.len(), 100);
        for n in [5, 10, 25, 45] {
            assert_eq!(a.subsets.iter().filter(|s| s.n == n).count(), 25);
        }
        let c = sample_diagnostic_subsets(&ds, "t", &pool, 100, &[5, 10, 25, 45], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn short_cell_skips_subset() {
        use Prediction::*;
        let mut rows = vec![(1, Pred1); 20];
        rows.extend(vec![(1, Pred0); 20]);
        rows.extend(vec![(0, Pred1); 3]);
        rows.extend(vec![(0, Pred0); 20]);
        let ds = dataset(&rows);
        let pool: BTreeSet<Idx> = ds.reactions.iter().map(|r| r.idx).collect();
        let report = sample_diagnostic_subsets(&ds, "t", &pool, 4, &[5], 1).unwrap();
        assert!(report.subsets.is_empty());
        assert_eq!(report.skipped.len(), 4);
        assert_eq!(report.skipped[0].cell, Cell::R01);
        assert_eq!((report.skipped[0].have, report.skipped[0].need), (3, 5));
    }

    proptest! {
        #[test]
        fn cells_are_disjoint_and_consistent(seed in any::<u64>(), m in 1usize..12) {
            let ds = balanced(30);
            let pool: BTreeSet<Idx> = ds.reactions.iter().map(|r| r.idx).filter(|i| i % 3 != 0).collect();
            let report = sample_diagnostic_subsets(&ds, "t", &pool, m, &[5, 10, 20], seed).unwrap();
            for s in &report.subsets {
                let all: Vec<Idx> = s.members().collect();
                let unique: BTreeSet<Idx> = all.iter().copied().collect();
                prop_assert_eq!(all.len(), unique.len());
                for cell in Cell::ALL {
                    prop_assert_eq!(s.cell(cell).len(), s.n);
                    for &idx in s.cell(cell) {
                        prop_assert!(pool.contains(&idx));
                        prop_assert_eq!(Cell::of(ds.label(idx).unwrap(), ds.prediction("t", idx)), cell);
                    }
                }
            }
        }
    }
}
