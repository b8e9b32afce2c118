//! Task-weight schedules S(t): epoch → λ over the four tasks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ict,
    PhraseIct,
    Retrieval,
    Reader,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ict, Task::PhraseIct, Task::Retrieval, Task::Reader];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Ict => "ict",
            Task::PhraseIct => "phrase_ict",
            Task::Retrieval => "retrieval",
            Task::Reader => "reader",
        }
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights([f64; 4]);

impl TaskWeights {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RomError::InvalidWeights(format!("negative or non-finite weight in {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(RomError::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(TaskWeights(weights))
    }

    pub fn only(task: Task) -> Self {
        let mut w = [0.0; 4];
        w[task.index()] = 1.0;
        TaskWeights(w)
    }

    /// Weights over {retrieval, reader}; the reader gets `1 - retrieval`.
    pub fn retrieval_reader(retrieval: f64) -> Result<Self> {
        Self::retrieval_reader_pair(retrieval, 1.0 - retrieval)
    }

    pub fn retrieval_reader_pair(retrieval: f64, reader: f64) -> Result<Self> {
        let mut w = [0.0; 4];
        w[Task::Retrieval.index()] = retrieval;
        w[Task::Reader.index()] = reader;
        Self::new(w)
    }

    pub fn get(&self, task: Task) -> f64 {
        self.0[task.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn active(&self) -> impl Iterator<Item = (Task, f64)> + '_ {
        Task::ALL.into_iter().map(|t| (t, self.get(t))).filter(|(_, w)| *w > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Pipeline,
    Equal,
    Gradual,
    Random,
    Iterative,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Pipeline,
        ScheduleKind::Equal,
        ScheduleKind::Gradual,
        ScheduleKind::Random,
        ScheduleKind::Iterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Pipeline => "pipeline",
            ScheduleKind::Equal => "equal",
            ScheduleKind::Gradual => "gradual",
            ScheduleKind::Random => "random",
            ScheduleKind::Iterative => "iterative",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = RomError;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RomError::invalid(format!("unknown schedule `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub total_epochs: usize,
    /// Floor weight of the non-dominant task in the iterative schedule.
    pub epsilon: f64,
    /// Epochs per dominance phase in the iterative schedule.
    pub period: usize,
    pub seed: u64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, total_epochs: usize) -> Self {
        Schedule {
            kind,
            total_epochs,
            epsilon: 0.05,
            period: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 2 {
            return Err(RomError::InvalidConfig("schedule needs at least 2 epochs".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(RomError::InvalidConfig("schedule.epsilon must be in (0, 0.5)".into()));
        }
        if self.period < 2 {
            return Err(RomError::InvalidConfig("schedule.period must be at least 2".into()));
        }
        Ok(())
    }

    /// Retrieval/reader weights for epoch `t` of `total_epochs`.
    pub fn weights_at(&self, t: usize) -> Result<TaskWeights> {
        self.validate()?;
        let total = self.total_epochs;
        if t >= total {
            return Err(RomError::EpochOutOfRange { t, total });
        }
        let tf = t as f64;
        let tt = total as f64;
        match self.kind {
            ScheduleKind::Pipeline => {
                let retrieval = if t < total.div_ceil(2) { 1.0 } else { 0.0 };
                TaskWeights::retrieval_reader(retrieval)
            }
            ScheduleKind::Equal => TaskWeights::retrieval_reader(0.5),
            ScheduleKind::Gradual => TaskWeights::retrieval_reader(((0.75 * tt - tf) / (0.5 * tt)).clamp(0.0, 1.0)),
            ScheduleKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(t as u64);
                TaskWeights::retrieval_reader(rng.random::<f64>())
            }
            ScheduleKind::Iterative => {
                let eps = self.epsilon;
                if (t / self.period).is_multiple_of(2) {
                    TaskWeights::retrieval_reader_pair(1.0 - eps, eps)
                } else {
                    TaskWeights::retrieval_reader_pair(eps, 1.0 - eps)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Retrieval,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Retrieval => "retrieval",
            Phase::Joint => "joint",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// ICT / PhraseICT share of the pretraining loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainMix {
    pub ict: f64,
    pub phrase_ict: f64,
}

impl PretrainMix {
    pub fn ict_only() -> Self {
        PretrainMix {
            ict: 1.0,
            phrase_ict: 0.0,
        }
    }
}

/// Weights for a training phase. The joint phase needs `schedule` and `epoch`.
pub fn phase_weights(phase: Phase, mix: PretrainMix, schedule: Option<&Schedule>, epoch: usize) -> Result<TaskWeights> {
    match phase {
        Phase::Pretrain => {
            let ok = mix.ict >= 0.0 && mix.phrase_ict >= 0.0 && ((mix.ict + mix.phrase_ict) - 1.0).abs() <= SUM_TOL;
            if !ok {
                return Err(RomError::InvalidWeights(format!(
                    "pretrain mix {{ict: {}, phrase_ict: {}}} must be non-negative and sum to 1",
                    mix.ict, mix.phrase_ict
                )));
            }
            TaskWeights::new([mix.ict, mix.phrase_ict, 0.0, 0.0])
        }
        Phase::Retrieval => Ok(TaskWeights::only(Task::Retrieval)),
        Phase::Joint => {
            let s = schedule.ok_or_else(|| RomError::invalid("joint phase needs a schedule"))?;
            s.weights_at(epoch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: TaskWeights) -> (f64, f64) {
        (w.get(Task::Retrieval), w.get(Task::Reader))
    }

    #[test]
    fn pipeline_halves() {
        let s = Schedule::new(ScheduleKind::Pipeline, 10);
        assert_eq!(pair(s.weights_at(3).unwrap()), (1.0, 0.0));
        assert_eq!(pair(s.weights_at(7).unwrap()), (0.0, 1.0));
        let odd = Schedule::new(ScheduleKind::Pipeline, 5);
        assert_eq!(pair(odd.weights_at(2).unwrap()), (1.0, 0.0));
        assert_eq!(pair(odd.weights_at(3).unwrap()), (0.0, 1.0));
    }

    #[test]
    fn gradual_examples() {
        let s = Schedule::new(ScheduleKind::Gradual, 8);
        assert_eq!(pair(s.weights_at(1).unwrap()), (1.0, 0.0));
        assert_eq!(pair(s.weights_at(4).unwrap()), (0.5, 0.5));
        assert_eq!(pair(s.weights_at(7).unwrap()), (0.0, 1.0));
    }

    #[test]
    fn iterative_alternates() {
        let s = Schedule::new(ScheduleKind::Iterative, 10);
        assert_eq!(pair(s.weights_at(0).unwrap()), (0.95, 0.05));
        assert_eq!(pair(s.weights_at(1).unwrap()), (0.95, 0.05));
        assert_eq!(pair(s.weights_at(2).unwrap()), (0.05, 0.95));
    }

    #[test]
    fn random_is_reproducible() {
        let mut s = Schedule::new(ScheduleKind::Random, 20);
        s.seed = 99;
        let a: Vec<_> = (0..20).map(|t| s.weights_at(t).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|t| s.weights_at(t).unwrap()).collect();
        assert_eq!(a, b);
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn out_of_range_and_invalid() {
        let s = Schedule::new(ScheduleKind::Equal, 4);
        assert!(matches!(s.weights_at(4), Err(RomError::EpochOutOfRange { .. })));
        let mut bad = s.clone();
        bad.epsilon = 0.5;
        assert!(bad.weights_at(0).is_err());
        assert!(TaskWeights::new([0.5, 0.6, 0.0, 0.0]).is_err());
        assert!(TaskWeights::new([1.5, -0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn phase_weight_examples() {
        let r = phase_weights(Phase::Retrieval, PretrainMix::ict_only(), None, 0).unwrap();
        assert_eq!(r.as_array(), [0.0, 0.0, 1.0, 0.0]);
        let p = phase_weights(Phase::Pretrain, PretrainMix::ict_only(), None, 0).unwrap();
        assert_eq!(p.as_array(), [1.0, 0.0, 0.0, 0.0]);
        let s = Schedule::new(ScheduleKind::Equal, 4);
        let j = phase_weights(Phase::Joint, PretrainMix::ict_only(), Some(&s), 1).unwrap();
        assert_eq!(j.as_array(), [0.0, 0.0, 0.5, 0.5]);
        let bad = PretrainMix {
            ict: 0.7,
            phrase_ict: 0.7,
        };
        assert!(phase_weights(Phase::Pretrain, bad, None, 0).is_err());
    }

    #[test]
    fn gradual_is_monotone() {
        for total in [2usize, 4, 8, 100] {
            let s = Schedule::new(ScheduleKind::Gradual, total);
            let lam: Vec<f64> = (0..total).map(|t| s.weights_at(t).unwrap().get(Task::Retrieval)).collect();
            assert!(lam.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
