//! Momentum encoder maintenance and the FIFO queue of contrastive keys.
//!
//! The momentum parameters trail the online encoder via
//! `theta_m <- mu * theta_m + (1 - mu) * theta`. Keys produced by the
//! momentum encoder are stored detached: the queue holds plain values and
//! gradient never flows into them.

use std::collections::VecDeque;

use thiserror::Error;

use crate::affect::ValenceRating;
use crate::autodiff::Var;
use crate::encoder::EncoderParams;
use crate::losses::{loss_soft_cl_with_candidates, ContrastiveBatch, LossError};
use crate::tensor::{NumericError, Tensor};

#[derive(Debug, Error)]
pub enum MomentumError {
    #[error("momentum coefficient {0} outside [0, 1]")]
    BadMu(f64),
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("queue dimension is {expected}, got rows of width {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Fixed-capacity FIFO of detached (representation, valence) pairs.
#[derive(Debug, Clone)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, f64)>,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MomentumQueue {
            capacity,
            dim,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append rows in batch order, skipping sentinel-valence rows; evicts
    /// oldest entries once capacity is exceeded.
    pub fn enqueue(
        &mut self,
        reps: &Tensor,
        valences: &[ValenceRating],
    ) -> Result<(), MomentumError> {
        let rows = reps.rows()?;
        let cols = reps.cols()?;
        if cols != self.dim {
            return Err(MomentumError::DimMismatch {
                expected: self.dim,
                got: cols,
            });
        }
        if rows != valences.len() {
            return Err(MomentumError::DimMismatch {
                expected: rows,
                got: valences.len(),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (r, valence) in valences.iter().enumerate() {
            if valence.is_sentinel() {
                continue;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries
                .push_back((reps.row(r)?.to_vec(), valence.value()));
        }
        Ok(())
    }

    /// Queue contents as a `[len, dim]` matrix plus valences, oldest first.
    /// `None` when empty.
    pub fn as_batch(&self) -> Option<(Tensor, Vec<f64>)> {
        if self.entries.is_empty() {
            return None;
        }
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        let mut vals = Vec::with_capacity(self.entries.len());
        for (row, v) in &self.entries {
            data.extend_from_slice(row);
            vals.push(*v);
        }
        Some((
            Tensor::new(vec![self.entries.len(), self.dim], data).expect("queue matrix"),
            vals,
        ))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.entries.iter().map(|(r, v)| (r.as_slice(), *v))
    }

    /// Rebuild a queue from checkpointed contents.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        rows: Vec<(Vec<f64>, f64)>,
    ) -> Result<Self, MomentumError> {
        let mut q = MomentumQueue::new(capacity, dim);
        for (row, v) in rows {
            if row.len() != dim {
                return Err(MomentumError::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if q.entries.len() == capacity {
                q.entries.pop_front();
            }
            q.entries.push_back((row, v));
        }
        Ok(q)
    }
}

/// The momentum copy of the encoder parameters plus its coefficient.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub params: EncoderParams,
    pub mu: f64,
}

impl MomentumState {
    /// Copies the online parameters, per the initialization discipline.
    pub fn init(theta: &EncoderParams, mu: f64) -> Result<Self, MomentumError> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(MomentumError::BadMu(mu));
        }
        Ok(MomentumState {
            params: theta.clone(),
            mu,
        })
    }
}

/// One `theta_m <- mu * theta_m + (1 - mu) * theta` update; the online
/// parameters are untouched.
pub fn momentum_update(
    state: &mut MomentumState,
    theta: &EncoderParams,
) -> Result<(), MomentumError> {
    let mu = state.mu;
    if !(0.0..=1.0).contains(&mu) {
        return Err(MomentumError::BadMu(mu));
    }
    if state.params.len() != theta.len() {
        return Err(MomentumError::ParamMismatch(format!(
            "{} vs {} tensors",
            state.params.len(),
            theta.len()
        )));
    }
    for (name, target) in state.params.iter_mut() {
        let source = theta.get(name).ok_or_else(|| {
            MomentumError::ParamMismatch(format!("missing parameter {name}"))
        })?;
        if source.shape() != target.shape() {
            return Err(MomentumError::ParamMismatch(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                target.shape(),
                source.shape()
            )));
        }
        for (t, s) in target.data_mut().iter_mut().zip(source.data()) {
            *t = mu * *t + (1.0 - mu) * s;
        }
    }
    Ok(())
}

/// Soft contrastive loss over the union of in-batch rows and queue entries.
/// Anchors are the in-batch rows only; queue rows are candidates and never
/// receive gradient. With an empty queue this is exactly the in-batch soft
/// loss.
pub fn loss_momentum_cl<'t>(
    batch: &ContrastiveBatch<'t>,
    queue: &MomentumQueue,
    tau: f64,
) -> Result<Var<'t>, LossError> {
    match queue.as_batch() {
        None => loss_soft_cl_with_candidates(batch, None, tau),
        Some((reps, vals)) => {
            loss_soft_cl_with_candidates(batch, Some((&reps, &vals)), tau)
        }
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn queue_keeps_the_most_recent_rows_in_order(
            values in proptest::collection::vec((0.0f64..100.0, any::<bool>()), 1..40),
            capacity in 1usize..8,
        ) {
            let mut queue = MomentumQueue::new(capacity, 1);
            let mut kept: Vec<f64> = Vec::new();
            for (v, sentinel) in &values {
                let rating = if *sentinel {
                    ValenceRating::SENTINEL
                } else {
                    ValenceRating::rated(5.0).unwrap()
                };
                queue
                    .enqueue(&Tensor::from_rows(&[vec![*v]]).unwrap(), &[rating])
                    .unwrap();
                if !*sentinel {
                    kept.push(*v);
                }
                prop_assert!(queue.len() <= capacity);
            }
            let expected: Vec<f64> = kept
                .iter()
                .rev()
                .take(capacity)
                .rev()
                .copied()
                .collect();
            let got: Vec<f64> = queue.iter().map(|(row, _)| row[0]).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
