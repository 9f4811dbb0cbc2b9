use std::collections::BTreeMap;

use crate::InstanceId;

/// KV-aware routing: the instance with the most matched tokens, ties to
/// the lowest id. With no hits at all, the lowest id in `instances`.
pub fn route(hits: &BTreeMap<InstanceId, usize>, instances: &[InstanceId]) -> Option<InstanceId> {
    let mut best: Option<(&InstanceId, usize)> = None;
    for id in instances {
        let h = hits.get(id).copied().unwrap_or(0);
        match best {
            Some((b, bh)) if bh > h || (bh == h && b <= id) => {}
            _ => best = Some((id, h)),
        }
    }
    best.map(|(id, _)| id.clone())
}
