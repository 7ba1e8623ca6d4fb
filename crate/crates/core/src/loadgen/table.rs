use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::rng::unit_f64;

/// Probabilities of a row must sum to one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum State {
    NetLoad,
    MemAlloc,
    CpuLoad,
    Done,
}

impl State {
    pub const PRIMARY: [State; 3] = [State::NetLoad, State::MemAlloc, State::CpuLoad];
    pub const INITIAL: State = State::NetLoad;

    pub fn name(self) -> &'static str {
        match self {
            State::NetLoad => "NetLoad",
            State::MemAlloc => "MemAlloc",
            State::CpuLoad => "CpuLoad",
            State::Done => "Done",
        }
    }

    fn index(self) -> Option<usize> {
        match self {
            State::NetLoad => Some(0),
            State::MemAlloc => Some(1),
            State::CpuLoad => Some(2),
            State::Done => None,
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for State {
    type Err = TransitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "netload" | "net" => Ok(State::NetLoad),
            "memalloc" | "mem" => Ok(State::MemAlloc),
            "cpuload" | "cpu" => Ok(State::CpuLoad),
            "done" => Ok(State::Done),
            other => Err(TransitionError::UnknownState(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TransitionError {
    #[error("unknown state '{0}'")]
    UnknownState(String),
    #[error("malformed transition row '{0}'")]
    MalformedRow(String),
    #[error("state {0} has more than one row")]
    DuplicateRow(State),
    #[error("row for {state} sums to {sum}, expected 1")]
    RowSum { state: State, sum: f64 },
    #[error("row for {state} has invalid probability {prob} for {next}")]
    BadProbability { state: State, next: State, prob: f64 },
    #[error("{0} is reachable but has no row")]
    MissingRow(State),
    #[error("Done must not have outgoing transitions")]
    DoneHasRow,
    #[error("max_phase_entries must be at least 1")]
    ZeroCap,
    #[error("no transition out of Done")]
    FromDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Deterministic,
    Probabilistic,
}

/// Successor rules of the job state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    kind: TableKind,
    rows: BTreeMap<State, Vec<(State, f64)>>,
    max_phase_entries: u32,
}

impl TransitionTable {
    /// The fixed `NetLoad -> MemAlloc -> CpuLoad -> Done` progression.
    pub fn deterministic(max_phase_entries: u32) -> Self {
        let rows = BTreeMap::from([
            (State::NetLoad, vec![(State::MemAlloc, 1.0)]),
            (State::MemAlloc, vec![(State::CpuLoad, 1.0)]),
            (State::CpuLoad, vec![(State::Done, 1.0)]),
        ]);
        TransitionTable { kind: TableKind::Deterministic, rows, max_phase_entries: max_phase_entries.max(1) }
    }

    pub fn probabilistic(
        rows: BTreeMap<State, Vec<(State, f64)>>,
        max_phase_entries: u32,
    ) -> Result<Self, TransitionError> {
        let table = TransitionTable { kind: TableKind::Probabilistic, rows, max_phase_entries };
        table.validate()?;
        Ok(table)
    }

    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn max_phase_entries(&self) -> u32 {
        self.max_phase_entries
    }

    pub fn set_max_phase_entries(&mut self, cap: u32) -> Result<(), TransitionError> {
        if cap == 0 {
            return Err(TransitionError::ZeroCap);
        }
        self.max_phase_entries = cap;
        Ok(())
    }

    pub fn row(&self, state: State) -> Option<&[(State, f64)]> {
        self.rows.get(&state).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<(), TransitionError> {
        if self.max_phase_entries == 0 {
            return Err(TransitionError::ZeroCap);
        }
        if self.rows.get(&State::Done).is_some_and(|r| !r.is_empty()) {
            return Err(TransitionError::DoneHasRow);
        }
        for (&state, row) in &self.rows {
            if state == State::Done {
                continue;
            }
            let mut sum = 0.0;
            for &(next, prob) in row {
                if !prob.is_finite() || prob < 0.0 {
                    return Err(TransitionError::BadProbability { state, next, prob });
                }
                sum += prob;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(TransitionError::RowSum { state, sum });
            }
        }
        // Every state reachable from the initial state needs a row.
        let mut stack = vec![State::INITIAL];
        let mut seen = Vec::new();
        while let Some(state) = stack.pop() {
            if state == State::Done || seen.contains(&state) {
                continue;
            }
            seen.push(state);
            let row = self.rows.get(&state).ok_or(TransitionError::MissingRow(state))?;
            stack.extend(row.iter().filter(|(_, p)| *p > 0.0).map(|(s, _)| *s));
        }
        Ok(())
    }

    /// Whether `next` may follow `from` under this table.
    pub fn allows(&self, from: State, next: State) -> bool {
        self.rows.get(&from).is_some_and(|row| row.iter().any(|&(s, p)| s == next && p > 0.0))
    }
}

impl fmt::Display for TransitionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == TableKind::Deterministic {
            return f.write_str("deterministic");
        }
        let mut first_row = true;
        for (state, row) in &self.rows {
            if !first_row {
                f.write_str("; ")?;
            }
            first_row = false;
            write!(f, "{state}:")?;
            for (i, (next, prob)) in row.iter().enumerate() {
                let sep = if i == 0 { " " } else { ", " };
                write!(f, "{sep}{next}={prob}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for TransitionTable {
    type Err = TransitionError;

    /// Parses either `deterministic` or probabilistic rows written as
    /// `State: Next=p, Next=p; State: ...`. The visit cap is set separately.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let text = s.trim();
        if text.eq_ignore_ascii_case("deterministic") || text.is_empty() {
            return Ok(TransitionTable::deterministic(DEFAULT_MAX_PHASE_ENTRIES));
        }
        let mut rows = BTreeMap::new();
        for raw_row in text.split(';').map(str::trim).filter(|r| !r.is_empty()) {
            let (state, entries) =
                raw_row.split_once(':').ok_or_else(|| TransitionError::MalformedRow(raw_row.to_string()))?;
            let state: State = state.parse()?;
            let mut row = Vec::new();
            for entry in entries.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                let (next, prob) =
                    entry.split_once('=').ok_or_else(|| TransitionError::MalformedRow(raw_row.to_string()))?;
                let next: State = next.parse()?;
                let prob: f64 = prob.trim().parse().map_err(|_| TransitionError::MalformedRow(raw_row.to_string()))?;
                row.push((next, prob));
            }
            if rows.insert(state, row).is_some() {
                return Err(TransitionError::DuplicateRow(state));
            }
        }
        TransitionTable::probabilistic(rows, DEFAULT_MAX_PHASE_ENTRIES)
    }
}

pub const DEFAULT_MAX_PHASE_ENTRIES: u32 = 16;

/// Entry counts of the primary states within one job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VisitCounts([u32; 3]);

impl VisitCounts {
    pub fn record(&mut self, state: State) {
        if let Some(i) = state.index() {
            self.0[i] += 1;
        }
    }

    pub fn get(&self, state: State) -> u32 {
        state.index().map_or(0, |i| self.0[i])
    }
}

/// Picks the state following `current`.
///
/// Deterministic tables return the fixed successor without touching `rng`.
/// Probabilistic tables consume exactly one uniform draw and walk the
/// row's cumulative distribution; a successor that has already been
/// entered `max_phase_entries` times is replaced by `Done`.
pub fn next_state<R: RngCore + ?Sized>(
    table: &TransitionTable,
    current: State,
    visits: &VisitCounts,
    rng: &mut R,
) -> Result<State, TransitionError> {
    if current == State::Done {
        return Err(TransitionError::FromDone);
    }
    let row = table.rows.get(&current).ok_or(TransitionError::MissingRow(current))?;
    let next = match table.kind {
        TableKind::Deterministic => return Ok(row[0].0),
        TableKind::Probabilistic => {
            let u = unit_f64(rng);
            let mut acc = 0.0;
            let mut chosen = None;
            for &(state, prob) in row {
                if prob <= 0.0 {
                    continue;
                }
                acc += prob;
                chosen = Some(state);
                if u < acc {
                    break;
                }
            }
            chosen.unwrap_or(State::Done)
        }
    };
    if next != State::Done && visits.get(next) >= table.max_phase_entries {
        return Ok(State::Done);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn table(text: &str) -> TransitionTable {
        text.parse().unwrap()
    }

    #[test]
    fn deterministic_successors() {
        let t = TransitionTable::deterministic(4);
        let mut rng = seeded(1);
        let v = VisitCounts::default();
        assert_eq!(next_state(&t, State::NetLoad, &v, &mut rng), Ok(State::MemAlloc));
        assert_eq!(next_state(&t, State::MemAlloc, &v, &mut rng), Ok(State::CpuLoad));
        assert_eq!(next_state(&t, State::CpuLoad, &v, &mut rng), Ok(State::Done));
    }

    #[test]
    fn done_is_a_contract_violation() {
        let t = TransitionTable::deterministic(1);
        let err = next_state(&t, State::Done, &VisitCounts::default(), &mut seeded(0));
        assert_eq!(err, Err(TransitionError::FromDone));
    }

    #[test]
    fn degenerate_row_always_done() {
        let t = table("NetLoad: Done=1.0");
        for seed in 0..100 {
            let s = next_state(&t, State::NetLoad, &VisitCounts::default(), &mut seeded(seed));
            assert_eq!(s, Ok(State::Done));
        }
    }

    #[test]
    fn row_sum_checked() {
        let err = "NetLoad: CpuLoad=0.6, Done=0.3; CpuLoad: Done=1".parse::<TransitionTable>();
        assert!(matches!(err, Err(TransitionError::RowSum { state: State::NetLoad, .. })));
    }

    #[test]
    fn reachable_state_needs_row() {
        let err = "NetLoad: CpuLoad=1".parse::<TransitionTable>();
        assert_eq!(err, Err(TransitionError::MissingRow(State::CpuLoad)));
    }

    #[test]
    fn done_row_rejected() {
        let err = "NetLoad: Done=1; Done: NetLoad=1".parse::<TransitionTable>();
        assert_eq!(err, Err(TransitionError::DoneHasRow));
    }

    #[test]
    fn cap_forces_done() {
        let t = table("NetLoad: CpuLoad=1; CpuLoad: CpuLoad=1");
        let mut visits = VisitCounts::default();
        visits.record(State::NetLoad);
        for _ in 0..DEFAULT_MAX_PHASE_ENTRIES {
            visits.record(State::CpuLoad);
        }
        let s = next_state(&t, State::CpuLoad, &visits, &mut seeded(3));
        assert_eq!(s, Ok(State::Done));
    }

    #[test]
    fn display_round_trips() {
        let t = table("CpuLoad: CpuLoad=0.7, Done=0.3; NetLoad: CpuLoad=0.25, MemAlloc=0.75; MemAlloc: CpuLoad=1");
        assert_eq!(t.to_string().parse::<TransitionTable>().unwrap(), t);
        assert_eq!(TransitionTable::deterministic(16).to_string(), "deterministic");
    }
}
