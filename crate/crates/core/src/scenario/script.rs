use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::{GovernorId, TransportContract};

pub const SCENARIO_FORMAT: &str = "bubblekit-scenario";
pub const SCENARIO_VERSION: u32 = 1;

/// How an actor answers signals at the bubbles it handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Accepts changes and follows the new line at forks.
    Accept,
    /// Declines changes and stays on the old line at forks.
    Decline,
    #[serde(alias = "choose_new")]
    ChooseNew,
    #[serde(alias = "choose_old")]
    ChooseOld,
    /// Asks on the terminal; stays pending when there is none.
    Interactive,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub governor: Option<GovernorId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Governance {
    pub governors: Vec<GovernorId>,
    /// Bubble name to owning governor. Unlisted bubbles go to their
    /// creating actor's governor, then to the first governor.
    #[serde(default)]
    pub ownership: BTreeMap<String, GovernorId>,
    #[serde(default)]
    pub transport: TransportContract,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
}

fn default_max_ticks() -> u64 {
    10_000
}

impl Default for Governance {
    fn default() -> Self {
        Governance {
            governors: vec![GovernorId::new("local")],
            ownership: BTreeMap::new(),
            transport: TransportContract::default(),
            max_ticks: default_max_ticks(),
        }
    }
}

/// The governance block is either inline JSON or a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GovernanceSpec {
    Inline(Governance),
    Toml(String),
}

impl GovernanceSpec {
    pub fn resolve(&self) -> Result<Governance> {
        match self {
            GovernanceSpec::Inline(g) => Ok(g.clone()),
            GovernanceSpec::Toml(text) => {
                toml::from_str(text).map_err(|e| Error::Script { line: 0, message: format!("governance: {e}") })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// Names the forbidden provider bubble.
    ForbidProvenance(String),
    ForbidPath(String),
    RequireAttribute { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSpec {
    Accept,
    Decline,
    ChooseNew,
    ChooseOld,
    /// Path to merged content.
    Merge(BTreeMap<String, String>),
}

/// Checks against the state after the preceding events. Unset fields are
/// not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub bubble: String,
    /// Path to expected content; `null` expects the path to be absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolves: Option<BTreeMap<String, Option<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub historical: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Create {
        name: String,
        #[serde(default)]
        bindings: BTreeMap<String, String>,
    },
    Derive {
        parent: String,
        name: String,
    },
    Clone {
        source: String,
        name: String,
    },
    Embed {
        host: String,
        #[serde(default)]
        mount: String,
        guest: String,
    },
    /// Content strings are stored as blobs; `null` removes the path.
    Commit {
        bubble: String,
        edits: BTreeMap<String, Option<String>>,
    },
    Freeze {
        bubble: String,
    },
    Destroy {
        bubble: String,
    },
    Insert {
        upstream: String,
        downstream: String,
        name: String,
        #[serde(default)]
        bindings: BTreeMap<String, Option<String>>,
    },
    Retract {
        bubble: String,
    },
    Dissolve {
        bubble: String,
        source: String,
    },
    Constrain {
        bubble: String,
        constraint: ConstraintSpec,
    },
    SetAttr {
        bubble: String,
        key: String,
        value: String,
    },
    /// Decides the pending signal at `index` (default: the oldest).
    Decide {
        bubble: String,
        decision: DecisionSpec,
        #[serde(default)]
        index: usize,
    },
    /// Commit sent from the actor's governor to the bubble's owner.
    Propose {
        bubble: String,
        edits: BTreeMap<String, Option<String>>,
    },
    /// Serializes and reloads every governor's federation.
    Reload,
    /// Applies actor policies until nothing more is decided.
    Settle,
    Expect(Expectation),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Create { .. } => "create",
            Op::Derive { .. } => "derive",
            Op::Clone { .. } => "clone",
            Op::Embed { .. } => "embed",
            Op::Commit { .. } => "commit",
            Op::Freeze { .. } => "freeze",
            Op::Destroy { .. } => "destroy",
            Op::Insert { .. } => "insert",
            Op::Retract { .. } => "retract",
            Op::Dissolve { .. } => "dissolve",
            Op::Constrain { .. } => "constrain",
            Op::SetAttr { .. } => "set-attr",
            Op::Decide { .. } => "decide",
            Op::Propose { .. } => "propose",
            Op::Reload => "reload",
            Op::Settle => "settle",
            Op::Expect(_) => "expect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(default)]
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(flatten)]
    pub op: Op,
    /// Error code the event must fail with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub format: String,
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub governance: Option<GovernanceSpec>,
    #[serde(default)]
    pub actors: BTreeMap<String, ActorSpec>,
    /// Apply actor policies after every event.
    #[serde(default = "yes")]
    pub settle: bool,
    pub events: Vec<Event>,
    /// Line of each event in the source text, when parsed from text.
    #[serde(skip)]
    pub lines: Vec<usize>,
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut script: ScenarioScript =
            serde_json::from_str(text).map_err(|e| Error::Script { line: e.line(), message: e.to_string() })?;
        script.lines = event_lines(text);
        script.validate()?;
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        crate::model::canonical_json_pretty(self)
    }

    pub fn line_of(&self, index: usize) -> usize {
        self.lines.get(index).copied().unwrap_or(0)
    }

    pub fn governance(&self) -> Result<Governance> {
        self.governance.as_ref().map_or_else(|| Ok(Governance::default()), GovernanceSpec::resolve)
    }

    fn validate(&self) -> Result<()> {
        if self.format != SCENARIO_FORMAT || self.version != SCENARIO_VERSION {
            return Err(Error::Script {
                line: 1,
                message: format!("expected {SCENARIO_FORMAT} version {SCENARIO_VERSION}, got {} {}", self.format, self.version),
            });
        }
        let governance = self.governance()?;
        if governance.governors.is_empty() {
            return Err(Error::Script { line: 1, message: "at least one governor is required".into() });
        }
        for (name, actor) in &self.actors {
            if let Some(g) = &actor.governor {
                if !governance.governors.contains(g) {
                    return Err(Error::Script { line: 1, message: format!("actor {name} names unknown governor {g}") });
                }
            }
        }
        let mut last = 0;
        for (i, event) in self.events.iter().enumerate() {
            let line = self.line_of(i);
            if event.tick < last {
                return Err(Error::Script { line, message: format!("tick {} goes back from {last}", event.tick) });
            }
            last = event.tick;
            if let Some(actor) = &event.actor {
                if !self.actors.contains_key(actor) {
                    return Err(Error::Script { line, message: format!("undefined actor {actor}") });
                }
            }
        }
        Ok(())
    }
}

/// Line numbers at which each element of the top-level `events` array
/// starts. A small scanner; the text is already known to be valid JSON.
pub(crate) fn event_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut line = 1;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut last_key = String::new();
    let mut current = String::new();
    let mut events_depth: Option<usize> = None;
    let mut expecting_element = false;
    for c in text.chars() {
        if c == '\n' {
            line += 1;
        }
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
                last_key = std::mem::take(&mut current);
            } else {
                current.push(c);
            }
            continue;
        }
        if expecting_element && !c.is_whitespace() && c != ']' {
            lines.push(line);
            expecting_element = false;
        }
        match c {
            '"' => in_string = true,
            '[' => {
                depth += 1;
                if depth == 2 && last_key == "events" && events_depth.is_none() {
                    events_depth = Some(depth);
                    expecting_element = true;
                }
            }
            '{' => depth += 1,
            '}' => depth = depth.saturating_sub(1),
            ']' => {
                if events_depth == Some(depth) {
                    events_depth = Some(usize::MAX);
                    expecting_element = false;
                }
                depth = depth.saturating_sub(1);
            }
            ',' if events_depth == Some(depth) => expecting_element = true,
            _ => {}
        }
    }
    lines
}
