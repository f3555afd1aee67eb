//! Majority voting over replicated results of one part.

use vc_core::metrics::ValidationPolicy;
use vc_core::protocol::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub part: u32,
    pub payload: Vec<u8>,
    pub reported_d: u64,
    pub app_bytes: u64,
    pub reported_w: f64,
    pub submitter: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pending,
    /// Indices of the agreeing records; the first one represents the part.
    Accepted { payload: Vec<u8>, agreeing: Vec<usize> },
    /// `m_max` records without a majority; the part must be reissued.
    Exhausted,
}

/// Records collected for one part.
#[derive(Debug, Clone, Default)]
pub struct VoteState {
    pub records: Vec<ResultRecord>,
    pub accepted: Option<Vec<u8>>,
}

impl VoteState {
    pub fn has_voted(&self, node: &NodeId) -> bool {
        self.records.iter().any(|r| r.submitter == *node)
    }

    /// Replicas still to be collected before the vote can conclude.
    pub fn wanted(&self, policy: ValidationPolicy) -> usize {
        if self.accepted.is_some() {
            return 0;
        }
        let min = policy.m_min() as usize;
        if self.records.len() < min {
            min - self.records.len()
        } else {
            // Quorum reached without a majority: one more at a time.
            usize::from(self.records.len() < policy.m_max() as usize)
        }
    }
}

/// EVAL: accepted once at least `m_min` records exist and more than half of
/// them are byte-identical.
pub fn eval(records: &[ResultRecord], policy: ValidationPolicy) -> Verdict {
    let n = records.len();
    if n < policy.m_min() as usize {
        return Verdict::Pending;
    }
    for r in records {
        let agreeing: Vec<usize> = (0..n).filter(|&j| records[j].payload == r.payload).collect();
        if agreeing.len() * 2 > n {
            return Verdict::Accepted { payload: r.payload.clone(), agreeing };
        }
    }
    if n >= policy.m_max() as usize {
        Verdict::Exhausted
    } else {
        Verdict::Pending
    }
}
