//! Which volunteer holds which part, and until when.

use std::collections::BTreeMap;

use vc_core::protocol::NodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub node: NodeId,
    pub assigned_at: f64,
    pub deadline: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AssignmentMap {
    parts: BTreeMap<u32, Vec<Assignment>>,
}

impl AssignmentMap {
    pub fn assignees(&self, part: u32) -> &[Assignment] {
        self.parts.get(&part).map_or(&[], Vec::as_slice)
    }

    pub fn holds(&self, part: u32, node: &NodeId) -> bool {
        self.assignees(part).iter().any(|a| a.node == *node)
    }

    /// Parts currently held by `node`.
    pub fn held_by(&self, node: &NodeId) -> Vec<u32> {
        self.parts
            .iter()
            .filter(|(_, v)| v.iter().any(|a| a.node == *node))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Records an assignment, replacing an earlier one of the same node.
    pub fn assign(&mut self, part: u32, node: NodeId, now: f64, timeout: f64) -> Assignment {
        let a = Assignment { node, assigned_at: now, deadline: now + timeout };
        let v = self.parts.entry(part).or_default();
        v.retain(|x| x.node != node);
        v.push(a);
        a
    }

    pub fn release(&mut self, part: u32, node: &NodeId) -> bool {
        let Some(v) = self.parts.get_mut(&part) else { return false };
        let before = v.len();
        v.retain(|a| a.node != *node);
        let removed = v.len() != before;
        if v.is_empty() {
            self.parts.remove(&part);
        }
        removed
    }

    pub fn clear_part(&mut self, part: u32) {
        self.parts.remove(&part);
    }

    /// TAIL: drops every assignment past its deadline and returns them.
    pub fn tail(&mut self, now: f64) -> Vec<(u32, Assignment)> {
        let mut expired = Vec::new();
        self.parts.retain(|part, v| {
            v.retain(|a| {
                let stale = a.deadline <= now;
                if stale {
                    expired.push((*part, *a));
                }
                !stale
            });
            !v.is_empty()
        });
        expired
    }

    pub fn len(&self) -> usize {
        self.parts.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(b: u8) -> NodeId {
        NodeId::from_bytes([b; 16])
    }

    #[test]
    fn tail_reissues_only_stale() {
        let mut m = AssignmentMap::default();
        m.assign(0, n(1), 0.0, 10.0);
        m.assign(1, n(2), 0.0, 5.0);
        m.assign(2, n(3), 1.0, 5.0);
        assert!(m.tail(4.0).is_empty());
        let expired = m.tail(6.0);
        assert_eq!(expired.iter().map(|(p, _)| *p).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(m.len(), 1);
        assert!(m.holds(0, &n(1)));
    }

    #[test]
    fn reassign_same_node_replaces() {
        let mut m = AssignmentMap::default();
        m.assign(4, n(1), 0.0, 1.0);
        m.assign(4, n(1), 2.0, 1.0);
        assert_eq!(m.assignees(4).len(), 1);
        assert_eq!(m.assignees(4)[0].deadline, 3.0);
        assert_eq!(m.held_by(&n(1)), vec![4]);
        assert!(m.release(4, &n(1)));
        assert!(m.is_empty());
        assert!(!m.release(4, &n(1)));
    }
}
