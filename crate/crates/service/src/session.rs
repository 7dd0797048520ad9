//! Learning sessions: one stepwise learner each, a FIFO writer lock and a
//! published read-only snapshot.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use promp_core::io::ProMPFile;
use promp_core::model::marginal_at_phase;
use promp_core::{BasisConfig, Demonstration, MetricReport, ProMPParams, StepwiseConfig, StepwiseState};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, Mutex};

/// Version tag carried by every response body and event.
pub const PAYLOAD_VERSION: u32 = 1;
/// Uploaded trajectories are resampled onto this many uniform phases.
pub const RESAMPLE_POINTS: usize = 50;
pub const HISTORY_LEN: usize = 200;
pub const DEFAULT_QUEUE_LIMIT: usize = 16;
pub const DEFAULT_ENVELOPE_SAMPLES: usize = 50;
pub const MAX_ENVELOPE_SAMPLES: usize = 2000;
/// Upper bound on `K * D` accepted from clients.
pub const MAX_WEIGHT_DIM: usize = 512;

const EVENT_BUFFER: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions are persisted here after every change and restored on start.
    pub snapshot_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
    /// Updates allowed to wait behind the one in flight before 429.
    pub queue_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { snapshot_dir: None, cors_origin: None, queue_limit: DEFAULT_QUEUE_LIMIT }
    }
}

/// Failure kinds mapped onto HTTP statuses by the API layer.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionError {
    NotFound(String),
    Invalid { code: &'static str, message: String },
    Busy,
    Numerical { code: &'static str, message: String },
    Storage(String),
}

impl SessionError {
    pub fn invalid(message: impl Into<String>) -> Self {
        SessionError::Invalid { code: "invalid_input", message: message.into() }
    }
}

impl From<promp_core::Error> for SessionError {
    fn from(e: promp_core::Error) -> Self {
        if e.is_numerical() {
            SessionError::Numerical { code: e.code(), message: e.to_string() }
        } else {
            SessionError::Invalid { code: e.code(), message: e.to_string() }
        }
    }
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::NotFound(id) => write!(f, "no session {id}"),
            SessionError::Invalid { message, .. } | SessionError::Numerical { message, .. } => f.write_str(message),
            SessionError::Busy => f.write_str("too many pending updates"),
            SessionError::Storage(message) => write!(f, "storage: {message}"),
        }
    }
}

impl std::error::Error for SessionError {}

pub type SessionResult<T> = Result<T, SessionError>;

/// Client-facing session settings.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "D")]
    pub d: Option<usize>,
    pub beta: Option<f64>,
    pub delta_min: Option<f64>,
    pub minibatch_size: Option<usize>,
    /// Ground truth used to attach metrics to every update.
    pub reference: Option<ProMPFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub beta: Option<f64>,
    pub delta_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopePoint {
    pub z: f64,
    pub mean: Vec<f64>,
    /// Two standard deviations of the predictive marginal per DOF.
    pub std2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub n: u64,
    pub delta: f64,
    pub demos: usize,
    pub timestamp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

/// What a demo upload did.
#[derive(Debug, Clone)]
pub struct DemoOutcome {
    /// False while the demo sits in a partially filled mini-batch.
    pub applied: bool,
    pub delta_used: Option<f64>,
    pub metrics: Option<MetricReport>,
    pub snapshot: Arc<Snapshot>,
}

/// Immutable view published after every change.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Bumped on every published change.
    pub revision: u64,
    pub state: StepwiseState,
    pub config: StepwiseConfig,
    pub buffered: usize,
    pub history: VecDeque<HistoryEntry>,
    pub updated_at: f64,
}

impl Snapshot {
    pub fn envelope(&self, samples: usize) -> Vec<EnvelopePoint> {
        envelope(&self.state.params, samples)
    }
}

#[derive(Debug, Clone)]
pub enum Event {
    Update(Arc<serde_json::Value>),
    Closed,
}

/// Counts writers that are queued or in flight; refuses beyond the limit.
#[derive(Debug)]
pub struct Admission {
    pending: AtomicUsize,
    limit: usize,
}

pub struct Ticket<'a>(&'a Admission);

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        self.0.pending.fetch_sub(1, Ordering::AcqRel);
    }
}

impl Admission {
    /// `queue_limit` waiters plus the one holding the lock.
    pub fn new(queue_limit: usize) -> Self {
        Self { pending: AtomicUsize::new(0), limit: queue_limit + 1 }
    }

    pub fn try_enter(&self) -> Option<Ticket<'_>> {
        self.pending
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |p| (p < self.limit).then_some(p + 1))
            .ok()
            .map(|_| Ticket(self))
    }

    pub fn pending(&self) -> usize {
        self.pending.load(Ordering::Acquire)
    }
}

struct Writer {
    current: Snapshot,
    buffer: Vec<Demonstration>,
}

pub struct Session {
    pub id: String,
    pub created_at: f64,
    pub reference: Option<ProMPParams>,
    minibatch_size: usize,
    writer: Mutex<Writer>,
    published: RwLock<Arc<Snapshot>>,
    admission: Admission,
    events: broadcast::Sender<Event>,
    snapshot_path: Option<PathBuf>,
    deleted: AtomicBool,
}

/// Persisted form of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionFile {
    pub version: u32,
    pub session_id: String,
    pub created_at: f64,
    pub minibatch_size: usize,
    pub history: VecDeque<HistoryEntry>,
    pub promp: ProMPFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ProMPFile>,
}

pub fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Mean and ±2σ band of the predictive marginal on `samples` uniform phases.
pub fn envelope(params: &ProMPParams, samples: usize) -> Vec<EnvelopePoint> {
    (0..samples)
        .map(|i| {
            let z = if samples == 1 { 0.5 } else { i as f64 / (samples - 1) as f64 };
            let (mean, cov) = marginal_at_phase(params, z);
            EnvelopePoint {
                z,
                mean: mean.iter().cloned().collect(),
                std2: cov.diagonal().iter().map(|v| 2.0 * v.max(0.0).sqrt()).collect(),
            }
        })
        .collect()
}

/// Linear interpolation of a raw trajectory onto [`RESAMPLE_POINTS`] uniform phases.
pub fn resample(points: &[TrajectoryPoint], d: usize) -> SessionResult<Demonstration> {
    if points.len() < 2 {
        return Err(SessionError::Invalid {
            code: "degenerate_trajectory",
            message: format!("trajectory has {} points, need at least 2", points.len()),
        });
    }
    for (i, p) in points.iter().enumerate() {
        if p.y.len() != d {
            return Err(SessionError::Invalid {
                code: "dimension_mismatch",
                message: format!("point {i} has {} values, session has D={d}", p.y.len()),
            });
        }
        if !p.t.is_finite() || p.y.iter().any(|v| !v.is_finite()) {
            return Err(SessionError::invalid(format!("point {i} is not finite")));
        }
        if i > 0 && p.t <= points[i - 1].t {
            return Err(SessionError::Invalid {
                code: "non_monotone_time",
                message: format!("timestamps are not strictly increasing at index {i}"),
            });
        }
    }
    let (t0, t1) = (points[0].t, points[points.len() - 1].t);
    let mut seg = 0;
    let mut phases = Vec::with_capacity(RESAMPLE_POINTS);
    let mut states = Vec::with_capacity(RESAMPLE_POINTS);
    for i in 0..RESAMPLE_POINTS {
        let z = i as f64 / (RESAMPLE_POINTS - 1) as f64;
        let t = if i + 1 == RESAMPLE_POINTS { t1 } else { t0 + z * (t1 - t0) };
        while seg + 2 < points.len() && points[seg + 1].t < t {
            seg += 1;
        }
        let (a, b) = (&points[seg], &points[seg + 1]);
        let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        phases.push(z);
        states.push(DVector::from_fn(d, |j, _| a.y[j] + s * (b.y[j] - a.y[j])));
    }
    Ok(Demonstration::from_phases(phases, states)?)
}

fn validate_settings(k: usize, d: usize) -> SessionResult<()> {
    if k == 0 || d == 0 || k.saturating_mul(d) > MAX_WEIGHT_DIM {
        return Err(SessionError::Invalid {
            code: "config_error",
            message: format!("need K >= 1, D >= 1 and K*D <= {MAX_WEIGHT_DIM}, got K={k}, D={d}"),
        });
    }
    Ok(())
}

impl Session {
    fn build(
        id: String,
        created_at: f64,
        state: StepwiseState,
        config: StepwiseConfig,
        history: VecDeque<HistoryEntry>,
        reference: Option<ProMPParams>,
        service: &ServiceConfig,
    ) -> Self {
        let minibatch_size = config.minibatch_size;
        let current = Snapshot { revision: 0, state, config, buffered: 0, history, updated_at: created_at };
        let published = RwLock::new(Arc::new(current.clone()));
        let snapshot_path = service.snapshot_dir.as_ref().map(|dir| dir.join(format!("{id}.json")));
        Self {
            id,
            created_at,
            reference,
            minibatch_size,
            writer: Mutex::new(Writer { current, buffer: Vec::new() }),
            published,
            admission: Admission::new(service.queue_limit),
            events: broadcast::channel(EVENT_BUFFER).0,
            snapshot_path,
            deleted: AtomicBool::new(false),
        }
    }

    pub fn create(request: CreateRequest, service: &ServiceConfig) -> SessionResult<Self> {
        let reference = request.reference.as_ref().map(ProMPFile::to_params).transpose()?;
        let k = request.k.or(reference.as_ref().map(|r| r.basis.k)).unwrap_or(8);
        let d = request.d.or(reference.as_ref().map(|r| r.basis.d)).unwrap_or(2);
        validate_settings(k, d)?;
        let basis = BasisConfig::new(k, d)?;
        if let Some(r) = &reference {
            if r.basis != basis {
                return Err(SessionError::Invalid {
                    code: "dimension_mismatch",
                    message: format!(
                        "reference basis (K={}, D={}) differs from the session basis",
                        r.basis.k, r.basis.d
                    ),
                });
            }
        }
        let mut config =
            StepwiseConfig::new(&basis, request.beta.unwrap_or(0.75)).with_delta_min(request.delta_min.unwrap_or(0.0));
        config.minibatch_size = request.minibatch_size.unwrap_or(1);
        let state = StepwiseState::init(&config, basis)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        Ok(Self::build(id, now_secs(), state, config, VecDeque::new(), reference, service))
    }

    pub fn restore(file: SessionFile, service: &ServiceConfig) -> SessionResult<Self> {
        let Some((state, mut config)) = file.promp.to_state()? else {
            return Err(SessionError::Storage(format!("session {} has no learner state", file.session_id)));
        };
        config.minibatch_size = file.minibatch_size;
        config.validate(&state.params.basis)?;
        let reference = file.reference.as_ref().map(ProMPFile::to_params).transpose()?;
        Ok(Self::build(file.session_id, file.created_at, state, config, file.history, reference, service))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.published.read().expect("snapshot lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size
    }

    pub fn pending_writers(&self) -> usize {
        self.admission.pending()
    }

    fn to_file(&self, snap: &Snapshot) -> SessionFile {
        SessionFile {
            version: PAYLOAD_VERSION,
            session_id: self.id.clone(),
            created_at: self.created_at,
            minibatch_size: self.minibatch_size,
            history: snap.history.clone(),
            promp: ProMPFile::from_state(&snap.state, &snap.config),
            reference: self.reference.as_ref().map(ProMPFile::from_params),
        }
    }

    fn persist(&self, snap: &Snapshot) -> SessionResult<()> {
        let Some(path) = &self.snapshot_path else { return Ok(()) };
        let text = serde_json::to_string(&self.to_file(snap)).expect("session file serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))
    }

    /// Runs `change` under the writer lock, then persists and publishes.
    async fn write<T>(
        &self,
        change: impl FnOnce(&mut Writer) -> SessionResult<T>,
    ) -> SessionResult<(T, Arc<Snapshot>)> {
        let _ticket = self.admission.try_enter().ok_or(SessionError::Busy)?;
        let mut writer = self.writer.lock().await;
        if self.deleted.load(Ordering::Acquire) {
            return Err(SessionError::NotFound(self.id.clone()));
        }
        let saved = (writer.current.clone(), writer.buffer.clone());
        let out = change(&mut writer).and_then(|out| {
            writer.current.revision += 1;
            writer.current.updated_at = now_secs();
            self.persist(&writer.current).map(|_| out)
        });
        let out = match out {
            Ok(out) => out,
            Err(e) => {
                (writer.current, writer.buffer) = saved;
                return Err(e);
            }
        };
        let snap = Arc::new(writer.current.clone());
        *self.published.write().expect("snapshot lock") = snap.clone();
        Ok((out, snap))
    }

    pub async fn add_demo(&self, demo: Demonstration) -> SessionResult<DemoOutcome> {
        let reference = self.reference.clone();
        let ((applied, delta_used, metrics), snap) = self
            .write(|w| {
                w.buffer.push(demo);
                if w.buffer.len() < w.current.config.minibatch_size {
                    w.current.buffered = w.buffer.len();
                    return Ok((false, None, None));
                }
                let previous = w.current.state.params.sigma_w.clone();
                let first = w.current.state.n == 1;
                let payload = w.current.state.add_minibatch(&w.current.config, &w.buffer)?;
                let metrics = match &reference {
                    Some(r) => Some(MetricReport::compare(r, &w.current.state.params, (!first).then_some(&previous))?),
                    None => None,
                };
                w.current.history.push_back(HistoryEntry {
                    n: payload.n,
                    delta: payload.delta_used,
                    demos: w.buffer.len(),
                    timestamp: now_secs(),
                    metrics: metrics.clone(),
                });
                while w.current.history.len() > HISTORY_LEN {
                    w.current.history.pop_front();
                }
                w.buffer.clear();
                w.current.buffered = 0;
                Ok((true, Some(payload.delta_used), metrics))
            })
            .await?;
        if applied {
            let event = serde_json::json!({
                "version": PAYLOAD_VERSION,
                "type": "update",
                "session_id": self.id,
                "n": snap.state.n,
                "delta": delta_used,
                "envelope": snap.envelope(DEFAULT_ENVELOPE_SAMPLES),
                "metrics": metrics,
            });
            let _ = self.events.send(Event::Update(Arc::new(event)));
        }
        Ok(DemoOutcome { applied, delta_used, metrics, snapshot: snap })
    }

    /// Back to the initial parameters with the current settings.
    pub async fn reset(&self) -> SessionResult<Arc<Snapshot>> {
        let (_, snap) = self
            .write(|w| {
                w.current.state = StepwiseState::init(&w.current.config, w.current.state.params.basis.clone())?;
                w.current.history.clear();
                w.buffer.clear();
                w.current.buffered = 0;
                Ok(())
            })
            .await?;
        Ok(snap)
    }

    pub async fn patch_config(&self, patch: ConfigPatch) -> SessionResult<Arc<Snapshot>> {
        let (_, snap) = self
            .write(|w| {
                let mut config = w.current.config.clone();
                if let Some(beta) = patch.beta {
                    config.beta = beta;
                }
                if let Some(dm) = patch.delta_min {
                    config.delta_min = dm;
                }
                config.validate(&w.current.state.params.basis)?;
                w.current.state.reschedule(&config);
                w.current.config = config;
                Ok(())
            })
            .await?;
        Ok(snap)
    }

    /// Waits for in-flight writers, removes the persisted file and ends all streams.
    async fn close(&self) -> SessionResult<()> {
        self.deleted.store(true, Ordering::Release);
        let _writer = self.writer.lock().await;
        if let Some(path) = &self.snapshot_path {
            match fs::remove_file(path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(SessionError::Storage(format!("{}: {e}", path.display()))),
            }
        }
        let _ = self.events.send(Event::Closed);
        Ok(())
    }

    async fn persist_initial(&self) -> SessionResult<()> {
        let writer = self.writer.lock().await;
        self.persist(&writer.current)
    }
}

/// All live sessions.
pub struct Sessions {
    config: ServiceConfig,
    map: RwLock<HashMap<String, Arc<Session>>>,
}

impl Sessions {
    pub fn new(config: ServiceConfig) -> Self {
        Self { config, map: RwLock::new(HashMap::new()) }
    }

    /// Creates the snapshot directory if needed and loads every session in it.
    pub fn restore(config: ServiceConfig) -> SessionResult<Self> {
        let sessions = Self::new(config);
        if let Some(dir) = &sessions.config.snapshot_dir {
            fs::create_dir_all(dir).map_err(|e| SessionError::Storage(format!("{}: {e}", dir.display())))?;
            for path in session_files(dir)? {
                let text =
                    fs::read_to_string(&path).map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))?;
                let file: SessionFile = serde_json::from_str(&text)
                    .map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))?;
                let session = Session::restore(file, &sessions.config)?;
                sessions.map.write().expect("session map").insert(session.id.clone(), Arc::new(session));
            }
        }
        Ok(sessions)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub async fn create(&self, request: CreateRequest) -> SessionResult<Arc<Session>> {
        let session = Arc::new(Session::create(request, &self.config)?);
        session.persist_initial().await?;
        self.map.write().expect("session map").insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> SessionResult<Arc<Session>> {
        self.map.read().expect("session map").get(id).cloned().ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.map.read().expect("session map").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub async fn remove(&self, id: &str) -> SessionResult<()> {
        let session =
            self.map.write().expect("session map").remove(id).ok_or_else(|| SessionError::NotFound(id.to_string()))?;
        session.close().await
    }
}

fn session_files(dir: &Path) -> SessionResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| SessionError::Storage(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admission_caps_waiters() {
        let gate = Admission::new(2);
        let a = gate.try_enter().unwrap();
        let _b = gate.try_enter().unwrap();
        let _c = gate.try_enter().unwrap();
        assert!(gate.try_enter().is_none());
        drop(a);
        assert_eq!(gate.pending(), 2);
        assert!(gate.try_enter().is_some());
    }

    #[test]
    fn resampling_keeps_lines_straight() {
        let points: Vec<TrajectoryPoint> =
            [0.0, 0.3, 1.1, 2.0].iter().map(|t| TrajectoryPoint { t: *t, y: vec![2.0 * t, 1.0 - t] }).collect();
        let demo = resample(&points, 2).unwrap();
        assert_eq!(demo.len(), RESAMPLE_POINTS);
        for (z, s) in demo.phases.iter().zip(&demo.states) {
            let t = 2.0 * z;
            assert!((s[0] - 2.0 * t).abs() < 1e-12 && (s[1] - (1.0 - t)).abs() < 1e-12);
        }
        assert_eq!(demo.states[RESAMPLE_POINTS - 1][0], 4.0);
    }

    #[test]
    fn resampling_rejects_bad_input() {
        let p = |t: f64| TrajectoryPoint { t, y: vec![t] };
        assert!(matches!(resample(&[p(0.0)], 1), Err(SessionError::Invalid { code: "degenerate_trajectory", .. })));
        assert!(matches!(resample(&[p(0.0), p(0.0)], 1), Err(SessionError::Invalid { code: "non_monotone_time", .. })));
        assert!(matches!(
            resample(&[p(0.0), p(1.0)], 2),
            Err(SessionError::Invalid { code: "dimension_mismatch", .. })
        ));
        assert!(resample(&[p(0.0), p(f64::NAN)], 1).is_err());
    }

    #[test]
    fn envelope_of_the_standard_model() {
        let params = ProMPParams::standard(BasisConfig::new(4, 2).unwrap());
        let env = envelope(&params, 5);
        assert_eq!(env.len(), 5);
        assert_eq!(env[4].z, 1.0);
        assert!(env.iter().all(|p| p.mean == vec![0.0, 0.0] && p.std2.iter().all(|s| *s > 2.0)));
    }
}
