//! Game sessions between a human and trained agents.
//!
//! Every state change goes through [`Engine::apply`], which takes a normalised
//! request (session ids and timestamps already fixed) and is a pure function
//! of the current state. Accepted requests are appended to `requests.jsonl`;
//! replaying that file through a fresh engine rebuilds the same sessions and
//! rewrites `store.json` and `results.jsonl` byte for byte.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use refgame_core::context::ContextRecord;
use refgame_core::corpus::Difficulty;
use refgame_core::encoders::{resolve, ObjectMap, ObjectRepresentation};
use refgame_core::util;
use serde::{Deserialize, Serialize};

use crate::agents::Agents;
use crate::{ServiceError, ServiceResult};

pub const DEFAULT_ROUNDS: usize = 69;
const SCRAMBLE_STREAM: u64 = 0x5c;
const SPEAK_STREAM: u64 = 0x5b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// The model speaks, the human picks an object.
    HumanListener,
    /// The human describes the target, the model picks.
    HumanSpeaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub role: Role,
    /// Speaker checkpoint (human-listener sessions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    /// Listener checkpoint: the model listener for human-speaker sessions, or the
    /// internal listener that re-ranks speaker candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listener_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub round: usize,
    /// Presented slot picked by a human listener.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<usize>,
    /// Free text from a human speaker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LoggedRequest {
    CreateSession { session_id: String, created_at: u64, request: SessionRequest },
    SubmitRound { session_id: String, submission: Submission },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuedRound {
    pub context_id: String,
    pub difficulty: Difficulty,
    /// Canonical object order.
    pub object_ids: [String; 3],
    pub target: usize,
    /// Slot `i` shows `object_ids[presented[i]]`.
    pub presented: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
}

impl QueuedRound {
    pub fn presented_ids(&self) -> [String; 3] {
        self.presented.map(|i| self.object_ids[i].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chooser {
    Human,
    Model,
}

/// One finished round. The field names match the evaluation record format, so
/// `results.jsonl` can be summarised by the evaluation tooling directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub session_id: String,
    pub round: usize,
    pub context_id: String,
    pub difficulty: Difficulty,
    pub presented_ids: [String; 3],
    pub utterance: String,
    pub chooser: Chooser,
    pub choice: usize,
    pub chosen_id: String,
    pub target_id: String,
    pub correct: bool,
    pub latency_ms: u64,
    pub agent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSession {
    pub session_id: String,
    pub role: Role,
    pub request: SessionRequest,
    pub created_at: u64,
    pub queue: Vec<QueuedRound>,
    pub cursor: usize,
    pub results: Vec<RoundRecord>,
}

impl GameSession {
    pub fn agent_label(&self) -> String {
        let r = &self.request;
        match self.role {
            Role::HumanListener => match &r.listener_id {
                Some(l) => format!("speaker:{}+{l}", r.speaker_id.as_deref().unwrap_or("")),
                None => format!("speaker:{}", r.speaker_id.as_deref().unwrap_or("")),
            },
            Role::HumanSpeaker => format!("listener:{}", r.listener_id.as_deref().unwrap_or("")),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cursor == self.queue.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub slot: usize,
    pub object_id: String,
    pub image_url: String,
}

/// What the client sees of the current round. The target is never included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub session_id: String,
    pub role: Role,
    pub round: usize,
    pub total: usize,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ObjectSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
    /// Human speakers are told which slot to describe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_slot: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Bucket {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += usize::from(correct);
        self.accuracy = Some(self.correct as f64 / self.n as f64);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sessions: usize,
    pub overall: Bucket,
    pub hard: Bucket,
    pub easy: Bucket,
    pub per_agent: BTreeMap<String, Bucket>,
}

impl Report {
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a GameSession>) -> Self {
        let mut r = Report::default();
        for s in sessions {
            r.sessions += 1;
            let label = s.agent_label();
            let agent = r.per_agent.entry(label).or_default();
            for rec in &s.results {
                agent.add(rec.correct);
            }
            for rec in &s.results {
                r.overall.add(rec.correct);
                match rec.difficulty {
                    Difficulty::Hard => r.hard.add(rec.correct),
                    Difficulty::Easy => r.easy.add(rec.correct),
                }
            }
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub record: RoundRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<RoundView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Report>,
}

/// Contexts the service can draw rounds from, with their objects.
pub struct ContextPool {
    pub objects: ObjectMap,
    pub contexts: Vec<ContextRecord>,
}

impl ContextPool {
    pub fn new(objects: ObjectMap, contexts: Vec<ContextRecord>) -> ServiceResult<Self> {
        if contexts.is_empty() {
            return Err(ServiceError::BadRequest("context pool is empty".into()));
        }
        for c in &contexts {
            resolve(&objects, &c.object_ids)?;
        }
        Ok(Self { objects, contexts })
    }
}

struct Files {
    dir: PathBuf,
}

impl Files {
    fn log(&self) -> PathBuf {
        self.dir.join("requests.jsonl")
    }

    fn results(&self) -> PathBuf {
        self.dir.join("results.jsonl")
    }

    fn store(&self) -> PathBuf {
        self.dir.join("store.json")
    }

    fn append(path: &Path, line: &str) -> ServiceResult<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| refgame_core::Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| refgame_core::Error::io(path, e))?;
        Ok(())
    }
}

pub struct Engine {
    pool: ContextPool,
    agents: Box<dyn Agents>,
    sessions: Mutex<BTreeMap<String, GameSession>>,
    files: Option<Files>,
}

impl Engine {
    /// An engine persisting under `dir`. Any existing request log there is
    /// replayed to restore the sessions.
    pub fn open(pool: ContextPool, agents: Box<dyn Agents>, dir: Option<&Path>) -> ServiceResult<Self> {
        let mut engine = Self { pool, agents, sessions: Mutex::new(BTreeMap::new()), files: None };
        if let Some(dir) = dir {
            std::fs::create_dir_all(dir).map_err(|e| refgame_core::Error::io(dir, e))?;
            let files = Files { dir: dir.to_path_buf() };
            let log = files.log();
            if log.exists() {
                let entries: Vec<LoggedRequest> = util::read_jsonl(&log)?;
                for entry in entries {
                    engine.apply(entry)?;
                }
                log::info!("restored {} sessions from {}", engine.sessions.lock().unwrap().len(), log.display());
            }
            engine.files = Some(files);
        }
        Ok(engine)
    }

    /// Rebuilds a store under `out` from a request log.
    pub fn replay(pool: ContextPool, agents: Box<dyn Agents>, log: &Path, out: &Path) -> ServiceResult<Self> {
        if out.join("requests.jsonl").exists() {
            return Err(ServiceError::Conflict(format!("{} already holds a request log", out.display())));
        }
        let entries: Vec<LoggedRequest> = util::read_jsonl(log)?;
        let engine = Self::open(pool, agents, Some(out))?;
        for entry in entries {
            engine.apply(entry)?;
        }
        Ok(engine)
    }

    pub fn pool(&self) -> &ContextPool {
        &self.pool
    }

    fn build_queue(&self, request: &SessionRequest) -> ServiceResult<Vec<QueuedRound>> {
        let n = request.rounds.unwrap_or(DEFAULT_ROUNDS);
        if n == 0 {
            return Err(ServiceError::BadRequest("a session needs at least one round".into()));
        }
        match request.role {
            Role::HumanListener => {
                let speaker = request.speaker_id.as_deref().ok_or_else(|| ServiceError::BadRequest("human_listener sessions need speaker_id".into()))?;
                self.agents.check_speaker(speaker)?;
                if let Some(l) = &request.listener_id {
                    self.agents.check_listener(l)?;
                }
            }
            Role::HumanSpeaker => {
                let listener = request.listener_id.as_deref().ok_or_else(|| ServiceError::BadRequest("human_speaker sessions need listener_id".into()))?;
                self.agents.check_listener(listener)?;
            }
        }
        let mut rng = util::rng(request.seed);
        let mut order: Vec<usize> = (0..self.pool.contexts.len()).collect();
        order.shuffle(&mut rng);
        let mut queue = Vec::with_capacity(n);
        for r in 0..n {
            let ctx = &self.pool.contexts[order[r % order.len()]];
            let target = rng.random_range(0..3);
            let mut presented = [0, 1, 2];
            presented.shuffle(&mut util::derived_rng(request.seed, SCRAMBLE_STREAM, r as u64));
            let utterance = match request.role {
                Role::HumanListener => {
                    let objs = resolve(&self.pool.objects, &ctx.object_ids)?;
                    let seed = util::derived_rng(request.seed, SPEAK_STREAM, r as u64).random();
                    Some(self.agents.describe(request.speaker_id.as_deref().unwrap_or(""), request.listener_id.as_deref(), &objs, target, seed)?)
                }
                Role::HumanSpeaker => None,
            };
            queue.push(QueuedRound {
                context_id: ctx.context_id.clone(),
                difficulty: ctx.difficulty,
                object_ids: ctx.object_ids.clone(),
                target,
                presented,
                utterance,
            });
        }
        Ok(queue)
    }

    fn view(session: &GameSession) -> RoundView {
        let mut v = RoundView {
            session_id: session.session_id.clone(),
            role: session.role,
            round: session.cursor,
            total: session.queue.len(),
            complete: session.is_complete(),
            objects: Vec::new(),
            utterance: None,
            target_slot: None,
        };
        if let Some(q) = session.queue.get(session.cursor) {
            v.objects = q
                .presented_ids()
                .into_iter()
                .enumerate()
                .map(|(slot, id)| ObjectSlot { slot, image_url: format!("/static/{id}.svg"), object_id: id })
                .collect();
            match session.role {
                Role::HumanListener => v.utterance = q.utterance.clone(),
                Role::HumanSpeaker => v.target_slot = q.presented.iter().position(|&i| i == q.target),
            }
        }
        v
    }

    /// Applies one normalised request. Rejected requests leave every session unchanged.
    pub fn apply(&self, request: LoggedRequest) -> ServiceResult<Applied> {
        match &request {
            LoggedRequest::CreateSession { session_id, created_at, request: req } => {
                if self.sessions.lock().unwrap().contains_key(session_id) {
                    return Err(ServiceError::Conflict(format!("session {session_id} already exists")));
                }
                let queue = self.build_queue(req)?;
                let session = GameSession {
                    session_id: session_id.clone(),
                    role: req.role,
                    request: req.clone(),
                    created_at: *created_at,
                    queue,
                    cursor: 0,
                    results: Vec::new(),
                };
                let view = Self::view(&session);
                let mut sessions = self.sessions.lock().unwrap();
                if sessions.contains_key(session_id) {
                    return Err(ServiceError::Conflict(format!("session {session_id} already exists")));
                }
                sessions.insert(session_id.clone(), session);
                self.persist(&sessions, &request, None)?;
                Ok(Applied::Created(view))
            }
            LoggedRequest::SubmitRound { session_id, submission } => {
                // Model inference runs under the lock so submissions to one session stay ordered.
                let mut sessions = self.sessions.lock().unwrap();
                let session = sessions.get(session_id).ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
                let record = self.judge(session, submission)?;
                let session = sessions.get_mut(session_id).expect("checked above");
                session.results.push(record.clone());
                session.cursor += 1;
                let next = (!session.is_complete()).then(|| Self::view(session));
                let summary = session.is_complete().then(|| Report::from_sessions([&*session]));
                self.persist(&sessions, &request, Some(&record))?;
                Ok(Applied::Submitted(SubmitOutcome { record, next, summary }))
            }
        }
    }

    fn judge(&self, session: &GameSession, s: &Submission) -> ServiceResult<RoundRecord> {
        if s.round < session.cursor {
            return Err(ServiceError::Conflict(format!("round {} was already submitted", s.round)));
        }
        if s.round > session.cursor || session.is_complete() {
            return Err(ServiceError::Conflict(format!("round {} is not open (current round {})", s.round, session.cursor)));
        }
        let q = &session.queue[session.cursor];
        let presented = q.presented_ids();
        let (utterance, chooser, choice) = match session.role {
            Role::HumanListener => {
                if s.utterance.is_some() {
                    return Err(ServiceError::BadRequest("human listeners submit a choice, not an utterance".into()));
                }
                let choice = s.choice.ok_or_else(|| ServiceError::BadRequest("missing choice".into()))?;
                (q.utterance.clone().unwrap_or_default(), Chooser::Human, choice)
            }
            Role::HumanSpeaker => {
                if s.choice.is_some() {
                    return Err(ServiceError::BadRequest("human speakers submit an utterance, not a choice".into()));
                }
                let text = s.utterance.as_deref().map(str::trim).unwrap_or("");
                if text.is_empty() {
                    return Err(ServiceError::BadRequest("empty utterance".into()));
                }
                let objs: Vec<&ObjectRepresentation> = resolve(&self.pool.objects, &presented)?;
                let listener = session.request.listener_id.as_deref().unwrap_or("");
                (text.to_string(), Chooser::Model, self.agents.interpret(listener, &objs, text)?)
            }
        };
        if choice >= presented.len() {
            return Err(ServiceError::BadRequest(format!("choice {choice} outside slots 0..{}", presented.len())));
        }
        let target_id = q.object_ids[q.target].clone();
        let chosen_id = presented[choice].clone();
        Ok(RoundRecord {
            session_id: session.session_id.clone(),
            round: session.cursor,
            context_id: q.context_id.clone(),
            difficulty: q.difficulty,
            presented_ids: presented,
            utterance,
            chooser,
            choice,
            correct: chosen_id == target_id,
            chosen_id,
            target_id,
            latency_ms: s.latency_ms,
            agent: session.agent_label(),
        })
    }

    fn persist(&self, sessions: &BTreeMap<String, GameSession>, request: &LoggedRequest, record: Option<&RoundRecord>) -> ServiceResult<()> {
        let Some(files) = &self.files else { return Ok(()) };
        Files::append(&files.log(), &serde_json::to_string(request).map_err(refgame_core::Error::from)?)?;
        if let Some(r) = record {
            Files::append(&files.results(), &serde_json::to_string(r).map_err(refgame_core::Error::from)?)?;
        }
        let summary: BTreeMap<&String, SessionSummary> = sessions.iter().map(|(k, s)| (k, SessionSummary::of(s))).collect();
        let text = serde_json::to_string_pretty(&summary).map_err(refgame_core::Error::from)?;
        util::write_text(&files.store(), &text)?;
        Ok(())
    }

    pub fn current_round(&self, session_id: &str) -> ServiceResult<RoundView> {
        let sessions = self.sessions.lock().unwrap();
        let s = sessions.get(session_id).ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
        Ok(Self::view(s))
    }

    pub fn report(&self, session_id: &str) -> ServiceResult<Report> {
        let sessions = self.sessions.lock().unwrap();
        let s = sessions.get(session_id).ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
        Ok(Report::from_sessions([s]))
    }

    pub fn aggregate(&self) -> Report {
        Report::from_sessions(self.sessions.lock().unwrap().values())
    }

    pub fn session(&self, session_id: &str) -> Option<GameSession> {
        self.sessions.lock().unwrap().get(session_id).cloned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Applied {
    Created(RoundView),
    Submitted(SubmitOutcome),
}

/// Compacted per-session entry of `store.json`.
#[derive(Serialize)]
struct SessionSummary {
    role: Role,
    agent: String,
    created_at: u64,
    cursor: usize,
    total: usize,
    report: Report,
}

impl SessionSummary {
    fn of(s: &GameSession) -> Self {
        Self { role: s.role, agent: s.agent_label(), created_at: s.created_at, cursor: s.cursor, total: s.queue.len(), report: Report::from_sessions([s]) }
    }
}
