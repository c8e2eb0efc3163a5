//! Published key-frame state shared by the two lanes. Readers take an
//! immutable snapshot; writers swap in a whole new list at once.

use std::sync::{Arc, RwLock};

use depthfuse_core::{KeyFrame, RigidPose};

pub type Snapshot = Arc<Vec<Arc<KeyFrame>>>;

#[derive(Debug, Default)]
pub struct KeyframeStore {
    inner: RwLock<Snapshot>,
}

impl KeyframeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.inner.read().expect("store lock poisoned").clone()
    }

    pub fn get(&self, id: usize) -> Option<Arc<KeyFrame>> {
        self.snapshot().iter().find(|k| k.id == id).cloned()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the key-frame with the same id (refinement result).
    pub fn replace(&self, kf: KeyFrame) {
        let mut guard = self.inner.write().expect("store lock poisoned");
        let mut next: Vec<Arc<KeyFrame>> = guard.as_ref().clone();
        if let Some(slot) = next.iter_mut().find(|k| k.id == kf.id) {
            *slot = Arc::new(kf);
        } else {
            next.push(Arc::new(kf));
        }
        *guard = Arc::new(next);
    }

    /// Applies a batch of world-to-camera poses and appends `new` in one swap.
    pub fn publish(&self, poses: &[(usize, RigidPose)], new: Option<KeyFrame>) -> Snapshot {
        let mut guard = self.inner.write().expect("store lock poisoned");
        let mut next: Vec<Arc<KeyFrame>> = guard
            .iter()
            .map(|k| match poses.iter().find(|(id, _)| *id == k.id) {
                Some((_, p)) if *p != k.pose => {
                    let mut updated = k.as_ref().clone();
                    updated.pose = *p;
                    Arc::new(updated)
                }
                _ => k.clone(),
            })
            .collect();
        if let Some(kf) = new {
            next.push(Arc::new(kf));
        }
        let snap = Arc::new(next);
        *guard = snap.clone();
        snap
    }
}
