//! Session state machine and append-only storage for the labeling protocol.
//!
//! A session passes the gate, then runs conversations of at most
//! `max_turns` turns. Each turn shows two candidate replies in random order;
//! the choice is persisted as one [`ComparisonRecord`] before it is
//! acknowledged, and the chosen reply (a coin flip on a tie) continues the
//! conversation.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use morlaif_core::data::{ComparisonRecord, Label, PromptRef, ResponseRef, Role, Source, Target, Turn, GATE_FAILED};
use morlaif_core::rng;
use morlaif_core::world::{sample_response, Policy, ResponseSpace};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gate::GateConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("{0}")]
    Invalid(String),
    /// The request is well-formed but out of protocol order.
    #[error("{0}")]
    Protocol(String),
    #[error("storage error on {path}: {message}")]
    Storage { path: PathBuf, message: String },
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub seed: u64,
    pub max_turns: usize,
    pub max_conversations: usize,
    pub gate: GateConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            seed: 0,
            max_turns: 10,
            max_conversations: 10,
            gate: GateConfig::default(),
        }
    }
}

/// A source of candidate replies.
#[derive(Debug, Clone)]
pub enum Generator {
    /// Samples a template from a policy over the synthetic space; the prompt
    /// is chosen by hashing the human message.
    Policy {
        name: String,
        policy: Policy,
        space: Arc<ResponseSpace>,
    },
    /// Replays fixed texts in order, cycling.
    Queue { name: String, texts: Vec<String> },
}

impl Generator {
    pub fn name(&self) -> &str {
        match self {
            Generator::Policy { name, .. } | Generator::Queue { name, .. } => name,
        }
    }

    fn respond(&self, message: &str, index: u64, rng: &mut rng::StreamRng) -> Result<ResponseRef> {
        match self {
            Generator::Policy { name, policy, space } => {
                let prompt = (rng::derive_seed(0, message, 0) % space.n_prompts as u64) as usize;
                let (k, _) = sample_response(policy, prompt, rng).map_err(|e| ServiceError::Invalid(e.to_string()))?;
                Ok(ResponseRef::Text {
                    id: format!("{name}/p{prompt}/t{k}"),
                    text: format!("Response template {k} for prompt {prompt}."),
                })
            }
            Generator::Queue { name, texts } => {
                if texts.is_empty() {
                    return Err(ServiceError::Invalid(format!("generator `{name}` has no texts")));
                }
                let i = (index % texts.len() as u64) as usize;
                Ok(ResponseRef::Text {
                    id: format!("{name}/{i}"),
                    text: texts[i].clone(),
                })
            }
        }
    }
}

fn text_of(r: &ResponseRef) -> String {
    match r {
        ResponseRef::Text { text, .. } => text.clone(),
        ResponseRef::Template(k) => format!("Response template {k}."),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    turn: usize,
    /// Generator order.
    canonical: [ResponseRef; 2],
    swapped: bool,
}

impl Pending {
    fn displayed(&self) -> [&ResponseRef; 2] {
        let [a, b] = &self.canonical;
        if self.swapped {
            [b, a]
        } else {
            [a, b]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub conversation: usize,
    pub turn: usize,
    pub option_a: String,
    pub option_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceAck {
    pub conversation: usize,
    pub turn: usize,
    pub choice: Label,
    pub continuation: String,
    pub turn_count: usize,
    pub conversation_open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub gate_question: String,
    pub conversations_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewConversation {
    pub conversation: usize,
    pub conversations_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub worker_id: String,
    pub gate_passed: bool,
    pub conversation: usize,
    pub conversation_open: bool,
    pub transcript: Vec<Turn>,
    pub turn_count: usize,
    pub turns_remaining: usize,
    pub conversations_remaining: usize,
    pub pending: Option<Options>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Session {
    session_id: String,
    worker_id: String,
    seq: u64,
    created_at: u64,
    gate_passed: bool,
    gate_failed: bool,
    conversations_used: usize,
    transcript: Vec<Turn>,
    turn_count: usize,
    conversation_open: bool,
    /// Turns across all of this session's conversations; indexes the random streams.
    turns_total: u64,
    pending: Option<Pending>,
    last_ack: Option<ChoiceAck>,
}

impl Session {
    fn pair_id(&self, turn: usize) -> String {
        format!("{}-c{}-t{}", self.session_id, self.conversations_used, turn)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    f.write_all(bytes).map_err(|e| storage(&tmp, e))?;
    f.sync_all().map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}

fn read_log(path: &Path) -> Result<Vec<ComparisonRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(|e| storage(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| storage(path, e))?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Service {
    config: ServiceConfig,
    generators: [Generator; 2],
    root: PathBuf,
    sessions: HashMap<String, Session>,
    workers: HashMap<String, usize>,
    next_seq: u64,
}

impl Service {
    /// Opens (or creates) a store under `root`, restoring any saved sessions.
    pub fn open(config: ServiceConfig, generators: [Generator; 2], root: impl Into<PathBuf>) -> Result<Self> {
        if config.max_turns == 0 || config.max_conversations == 0 {
            return Err(ServiceError::Invalid("max_turns and max_conversations must be positive".into()));
        }
        let root = root.into();
        for d in ["sessions", "records"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| storage(&p, e))?;
        }
        let mut svc = Service {
            config,
            generators,
            root,
            sessions: HashMap::new(),
            workers: HashMap::new(),
            next_seq: 0,
        };
        svc.restore()?;
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.root.join("records").join(format!("{id}.jsonl"))
    }

    fn restore(&mut self) -> Result<()> {
        let dir = self.root.join("sessions");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| storage(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| storage(&p, e))?;
            let mut s: Session = serde_json::from_str(&text).map_err(|e| storage(&p, e))?;
            // a record written just before a crash completes its turn
            if let Some(pending) = s.pending.clone() {
                let log = read_log(&self.log_path(&s.session_id))?;
                if let Some(rec) = log.last().filter(|r| r.pair_id == s.pair_id(pending.turn)) {
                    let label = rec.label.ok_or_else(|| storage(&p, "logged record has no label"))?;
                    self.finish_turn(&mut s, label);
                    self.save(&s)?;
                }
            }
            *self.workers.entry(s.worker_id.clone()).or_default() += s.conversations_used;
            self.next_seq = self.next_seq.max(s.seq + 1);
            self.sessions.insert(s.session_id.clone(), s);
        }
        Ok(())
    }

    fn save(&self, s: &Session) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(s).map_err(|e| storage(&self.session_path(&s.session_id), e))?;
        atomic_write(&self.session_path(&s.session_id), &bytes)
    }

    fn append(&self, id: &str, rec: &ComparisonRecord) -> Result<()> {
        let path = self.log_path(id);
        let mut line = serde_json::to_vec(rec).map_err(|e| storage(&path, e))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| storage(&path, e))?;
        f.write_all(&line).map_err(|e| storage(&path, e))?;
        f.sync_data().map_err(|e| storage(&path, e))
    }

    fn remaining(&self, worker: &str) -> usize {
        self.config
            .max_conversations
            .saturating_sub(self.workers.get(worker).copied().unwrap_or(0))
    }

    fn get(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    fn take(&mut self, id: &str) -> Result<Session> {
        self.sessions.remove(id).ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    /// Runs `f` on a detached copy of the session, saving and reinserting it
    /// only if `f` succeeds.
    fn with_session<T>(&mut self, id: &str, f: impl FnOnce(&mut Self, &mut Session) -> Result<T>) -> Result<T> {
        let original = self.take(id)?;
        let mut s = original.clone();
        let out = f(self, &mut s);
        let keep = match &out {
            Ok(_) => match self.save(&s) {
                Ok(()) => s,
                Err(e) => {
                    self.sessions.insert(id.into(), original);
                    return Err(e);
                }
            },
            Err(_) => original,
        };
        self.sessions.insert(id.into(), keep);
        out
    }

    pub fn create_session(&mut self, worker_id: &str) -> Result<CreatedSession> {
        let worker_id = worker_id.trim();
        if worker_id.is_empty() {
            return Err(ServiceError::Invalid("worker_id must not be empty".into()));
        }
        if self.remaining(worker_id) == 0 {
            return Err(ServiceError::Protocol(format!(
                "worker `{worker_id}` has used all {} conversations",
                self.config.max_conversations
            )));
        }
        let seq = self.next_seq;
        let session_id = format!("{:016x}", rng::derive_seed(self.config.seed, "session", seq));
        let s = Session {
            session_id: session_id.clone(),
            worker_id: worker_id.into(),
            seq,
            created_at: now_ms(),
            gate_passed: false,
            gate_failed: false,
            conversations_used: 1,
            transcript: Vec::new(),
            turn_count: 0,
            conversation_open: true,
            turns_total: 0,
            pending: None,
            last_ack: None,
        };
        self.save(&s)?;
        self.next_seq += 1;
        *self.workers.entry(worker_id.into()).or_default() += 1;
        self.sessions.insert(session_id.clone(), s);
        Ok(CreatedSession {
            session_id,
            gate_question: self.config.gate.question.clone(),
            conversations_remaining: self.remaining(worker_id),
        })
    }

    pub fn submit_gate(&mut self, id: &str, answer: &str) -> Result<GateResult> {
        self.with_session(id, |svc, s| {
            if s.gate_passed {
                return Err(ServiceError::Protocol("gate already passed".into()));
            }
            let passed = svc.config.gate.passes(answer);
            if passed {
                s.gate_passed = true;
            } else {
                s.gate_failed = true;
            }
            Ok(GateResult { passed })
        })
    }

    pub fn next_turn(&mut self, id: &str, message: &str) -> Result<Options> {
        if message.trim().is_empty() {
            return Err(ServiceError::Invalid("message must not be empty".into()));
        }
        self.with_session(id, |svc, s| {
            if !s.gate_passed {
                return Err(ServiceError::Protocol("the gate question has not been passed".into()));
            }
            if !s.conversation_open {
                return Err(ServiceError::Protocol(
                    "conversation is closed; start a new conversation".into(),
                ));
            }
            if s.pending.is_some() {
                return Err(ServiceError::Protocol("a choice is outstanding for this turn".into()));
            }
            let seed = svc.config.seed;
            let n = s.turns_total;
            let mut responses = Vec::with_capacity(2);
            for (g, gen) in svc.generators.iter().enumerate() {
                let mut r = rng::stream(seed, &format!("generate/{}/{g}", s.session_id), n);
                responses.push(gen.respond(message, n, &mut r)?);
            }
            let swapped: bool = rng::stream(seed, &format!("display/{}", s.session_id), n).random();
            let b = responses.pop().expect("two generators");
            let a = responses.pop().expect("two generators");
            let pending = Pending {
                turn: s.turn_count + 1,
                canonical: [a, b],
                swapped,
            };
            s.transcript.push(Turn {
                role: Role::Human,
                content: message.to_string(),
            });
            let options = options_of(s, &pending);
            s.pending = Some(pending);
            Ok(options)
        })
    }

    /// Applies an accepted choice to the conversation.
    fn finish_turn(&self, s: &mut Session, choice: Label) -> ChoiceAck {
        let pending = s.pending.take().expect("pending turn");
        let [a, b] = pending.displayed();
        let chosen = match choice {
            Label::A => a,
            Label::B => b,
            Label::Tie => {
                let r: bool = rng::stream(self.config.seed, &format!("tie/{}", s.session_id), s.turns_total).random();
                if r {
                    b
                } else {
                    a
                }
            }
        };
        let continuation = text_of(chosen);
        s.transcript.push(Turn {
            role: Role::Assistant,
            content: continuation.clone(),
        });
        s.turn_count += 1;
        s.turns_total += 1;
        if s.turn_count >= self.config.max_turns {
            s.conversation_open = false;
        }
        let ack = ChoiceAck {
            conversation: s.conversations_used,
            turn: pending.turn,
            choice,
            continuation,
            turn_count: s.turn_count,
            conversation_open: s.conversation_open,
        };
        s.last_ack = Some(ack.clone());
        ack
    }

    /// Records a choice. Resubmitting the last answered `turn` returns the
    /// original acknowledgment without writing a second record.
    pub fn submit_choice(&mut self, id: &str, choice: &str, turn: Option<usize>) -> Result<ChoiceAck> {
        let label: Label = choice
            .parse()
            .map_err(|_| ServiceError::Invalid(format!("invalid choice `{choice}`; expected A, B or TIE")))?;
        self.with_session(id, |svc, s| {
            let Some(pending) = s.pending.clone() else {
                if let (Some(t), Some(ack)) = (turn, &s.last_ack) {
                    if ack.turn == t && ack.conversation == s.conversations_used && ack.choice == label {
                        return Ok(ack.clone());
                    }
                }
                return Err(ServiceError::Protocol("no options are outstanding".into()));
            };
            if let Some(t) = turn {
                if t != pending.turn {
                    return Err(ServiceError::Protocol(format!(
                        "choice is for turn {t} but turn {} is outstanding",
                        pending.turn
                    )));
                }
            }
            let [a, b] = pending.displayed();
            let mut quality_flags = BTreeSet::new();
            if s.gate_failed {
                quality_flags.insert(GATE_FAILED.to_string());
            }
            let rec = ComparisonRecord {
                pair_id: s.pair_id(pending.turn),
                prompt_ref: PromptRef::Conversation(s.transcript.clone()),
                response_a: a.clone(),
                response_b: b.clone(),
                target: Target::Overall,
                label: Some(label),
                source: Source::Human,
                position_swapped: pending.swapped,
                quality_flags,
                created_at: now_ms(),
            };
            svc.append(&s.session_id, &rec)?;
            Ok(svc.finish_turn(s, label))
        })
    }

    /// Closes the current conversation and opens the next one, which counts
    /// against the worker's cap.
    pub fn new_conversation(&mut self, id: &str) -> Result<NewConversation> {
        let worker = self.get(id)?.worker_id.clone();
        if self.remaining(&worker) == 0 {
            self.with_session(id, |_, s| {
                s.conversation_open = false;
                s.pending = None;
                Ok(())
            })?;
            return Err(ServiceError::Protocol(format!(
                "worker `{worker}` has used all {} conversations",
                self.config.max_conversations
            )));
        }
        let out = self.with_session(id, |_, s| {
            s.conversations_used += 1;
            s.transcript.clear();
            s.turn_count = 0;
            s.conversation_open = true;
            s.pending = None;
            Ok(s.conversations_used)
        })?;
        *self.workers.entry(worker.clone()).or_default() += 1;
        Ok(NewConversation {
            conversation: out,
            conversations_remaining: self.remaining(&worker),
        })
    }

    pub fn state(&self, id: &str) -> Result<SessionState> {
        let s = self.get(id)?;
        Ok(SessionState {
            session_id: s.session_id.clone(),
            worker_id: s.worker_id.clone(),
            gate_passed: s.gate_passed,
            conversation: s.conversations_used,
            conversation_open: s.conversation_open,
            transcript: s.transcript.clone(),
            turn_count: s.turn_count,
            turns_remaining: if s.conversation_open {
                self.config.max_turns - s.turn_count
            } else {
                0
            },
            conversations_remaining: self.remaining(&s.worker_id),
            pending: s.pending.as_ref().map(|p| options_of(s, p)),
        })
    }

    /// Persisted records in canonical orientation, oldest session first.
    /// Records flagged at the gate are left out unless `include_flagged`.
    pub fn export(&self, include_flagged: bool) -> Result<Vec<ComparisonRecord>> {
        let mut sessions: Vec<&Session> = self.sessions.values().collect();
        sessions.sort_by_key(|s| s.seq);
        let mut out = Vec::new();
        for s in sessions {
            for rec in read_log(&self.log_path(&s.session_id))? {
                if include_flagged || !rec.quality_flags.contains(GATE_FAILED) {
                    out.push(rec.canonical());
                }
            }
        }
        Ok(out)
    }
}

fn options_of(s: &Session, p: &Pending) -> Options {
    let [a, b] = p.displayed();
    Options {
        conversation: s.conversations_used,
        turn: p.turn,
        option_a: text_of(a),
        option_b: text_of(b),
    }
}
