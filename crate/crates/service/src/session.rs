//! Session state and the transport-independent operations on it.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lcvg_core::checkpoint::CheckpointMeta;
use lcvg_core::control::ControlParams;
use lcvg_core::data::Frame;
use lcvg_core::mask::Mask;
use lcvg_core::model::Model;
use rand::Rng;

use crate::error::ApiError;

/// A loaded checkpoint. Parameters are shared by every session; the mutex
/// only serializes access to the underlying libtorch modules.
pub struct LoadedModel {
    pub id: String,
    pub meta: CheckpointMeta,
    model: Mutex<Model>,
}

impl LoadedModel {
    pub fn new(id: impl Into<String>, meta: CheckpointMeta, model: Model) -> Self {
        LoadedModel { id: id.into(), meta, model: Mutex::new(model) }
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn with<T>(&self, f: impl FnOnce(&Model) -> T) -> T {
        let guard = self.model.lock().unwrap_or_else(|e| e.into_inner());
        f(&guard)
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEntry {
    pub step: usize,
    pub frame: Frame,
    pub mask: Mask,
}

pub struct Session {
    pub id: String,
    pub model: Arc<LoadedModel>,
    pub frame: Frame,
    /// Always the mask network's output on `frame`.
    pub mask: Mask,
    pub step: usize,
    pub history: VecDeque<HistoryEntry>,
    history_cap: usize,
    pub created: Instant,
    pub last_used: Instant,
}

/// Result of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub step: usize,
    pub frame: Frame,
    pub mask: Mask,
    pub control_mask: Mask,
    pub warning: Option<String>,
}

impl Session {
    pub fn new(id: String, model: Arc<LoadedModel>, frame: Frame, history_cap: usize) -> Result<Self, ApiError> {
        if frame.height() != model.height() || frame.width() != model.width() {
            return Err(ApiError::unprocessable(format!(
                "frame is {}x{}, model `{}` expects {}x{}",
                frame.height(),
                frame.width(),
                model.id,
                model.height(),
                model.width()
            )));
        }
        let mask = model.with(|m| m.predict_mask(&frame))?;
        let now = Instant::now();
        let mut s = Session {
            id,
            model,
            frame,
            mask,
            step: 0,
            history: VecDeque::new(),
            history_cap: history_cap.max(1),
            created: now,
            last_used: now,
        };
        s.push_history();
        Ok(s)
    }

    fn push_history(&mut self) {
        if self.history.len() == self.history_cap {
            self.history.pop_front();
        }
        self.history.push_back(HistoryEntry { step: self.step, frame: self.frame.clone(), mask: self.mask.clone() });
    }

    /// The same single step the rollout loop takes.
    pub fn step(&mut self, control: &ControlParams) -> Result<StepOutput, ApiError> {
        if let Some(a) = control.affine() {
            a.check()?;
        }
        let adv = self.model.with(|m| m.advance(&self.frame, &self.mask, control))?;
        let warning = adv.control_mask.is_empty().then(|| "empty foreground".to_string());
        self.frame = adv.frame;
        self.mask = adv.mask;
        self.step += 1;
        self.last_used = Instant::now();
        self.push_history();
        Ok(StepOutput {
            step: self.step,
            frame: self.frame.clone(),
            mask: self.mask.clone(),
            control_mask: adv.control_mask,
            warning,
        })
    }
}

/// Sessions keyed by id; each behind its own async mutex so steps for one
/// session run strictly in arrival order while sessions proceed independently.
#[derive(Default)]
pub struct SessionStore {
    inner: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

pub fn new_session_id() -> String {
    let bytes: [u8; 16] = rand::thread_rng().gen();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl SessionStore {
    pub fn insert(&self, s: Session) -> Arc<tokio::sync::Mutex<Session>> {
        let id = s.id.clone();
        let arc = Arc::new(tokio::sync::Mutex::new(s));
        self.lock().insert(id, arc.clone());
        arc
    }

    pub fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.lock().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    pub fn remove(&self, id: &str) -> Result<(), ApiError> {
        self.lock()
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than `ttl` as of `now`. Sessions busy
    /// with a step are never idle and are kept.
    pub fn reap_idle(&self, ttl: Duration, now: Instant) -> usize {
        let mut map = self.lock();
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_used) <= ttl,
            Err(_) => true,
        });
        before - map.len()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<tokio::sync::Mutex<Session>>>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}
