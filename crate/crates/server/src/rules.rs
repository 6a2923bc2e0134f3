//! User-authored notification rules.
//!
//! An instant rule compares each new value with its threshold. A cumulative
//! rule aggregates the stored series over `[now - period, now]`, where `now`
//! is the timestamp of the reading being evaluated, so the triggering reading
//! is part of its own window.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use wallet_core::reading::{is_valid_device_id, is_valid_metric};
use wallet_core::{Duration, Timestamp};
use wallet_store::{SeriesKey, Store, StoreError};

use crate::notify::Notification;
use crate::persist;

/// Absolute tolerance of the `equal` operator.
pub const EQUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    #[serde(alias = ">")]
    Greater,
    #[serde(alias = "<")]
    Less,
    #[serde(alias = "=", alias = "==")]
    Equal,
}

impl Operator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Operator::Greater => value > threshold,
            Operator::Less => value < threshold,
            Operator::Equal => (value - threshold).abs() <= EQUAL_TOLERANCE,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Greater => ">",
            Operator::Less => "<",
            Operator::Equal => "=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let sum: f64 = values.iter().sum();
        Some(match self {
            Aggregation::Sum => sum,
            Aggregation::Mean => sum / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Instant,
    Cumulative,
}

/// What a user submits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub device_id: String,
    pub metric: String,
    pub kind: RuleKind,
    pub operator: Operator,
    pub threshold: f64,
    /// Window length of a cumulative rule.
    #[serde(default)]
    pub period_secs: Option<i64>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub cooldown_secs: i64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: u64,
    pub owner: String,
    #[serde(flatten)]
    pub spec: RuleSpec,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("{field}: {message}")]
    Validation { field: &'static str, message: String },
    #[error("rule {0} not found")]
    NotFound(u64),
}

fn invalid(field: &'static str, message: impl Into<String>) -> RuleError {
    RuleError::Validation {
        field,
        message: message.into(),
    }
}

impl RuleSpec {
    pub fn validate(&self) -> Result<(), RuleError> {
        if !is_valid_device_id(&self.device_id) {
            return Err(invalid("device_id", "must match [A-Za-z0-9_.-]{1,64}"));
        }
        if !is_valid_metric(&self.metric) {
            return Err(invalid("metric", "must match [a-z0-9_]+"));
        }
        if !self.threshold.is_finite() {
            return Err(invalid("threshold", "must be finite"));
        }
        if self.cooldown_secs < 0 {
            return Err(invalid("cooldown_secs", "must be zero or positive"));
        }
        match (self.kind, self.period_secs) {
            (RuleKind::Cumulative, None) => Err(invalid("period_secs", "required for cumulative rules")),
            (RuleKind::Cumulative, Some(p)) if p <= 0 => Err(invalid("period_secs", "must be positive")),
            (RuleKind::Instant, Some(_)) => Err(invalid("period_secs", "only cumulative rules have a period")),
            _ => Ok(()),
        }
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs(self.period_secs.unwrap_or(0))
    }

    pub fn cooldown(&self) -> Duration {
        Duration::from_secs(self.cooldown_secs)
    }
}

pub fn eval_instant(rule: &RuleSpec, value: f64) -> bool {
    rule.operator.holds(value, rule.threshold)
}

/// Aggregate over `[now - period, now]`, or `None` for an empty window.
pub fn cumulative_aggregate(rule: &RuleSpec, store: &Store, now: Timestamp) -> Result<Option<f64>, StoreError> {
    let key = SeriesKey::new(rule.device_id.as_str(), rule.metric.as_str())?;
    let from = now.saturating_sub(rule.period());
    let to = now.saturating_add(Duration::from_micros(1));
    let values: Vec<f64> = store.query(&key, from, to)?.into_iter().map(|p| p.value).collect();
    Ok(rule.aggregation.apply(&values))
}

/// The aggregate when the rule fires, `None` when it does not.
pub fn eval_cumulative(rule: &RuleSpec, store: &Store, now: Timestamp) -> Result<Option<f64>, StoreError> {
    Ok(cumulative_aggregate(rule, store, now)?.filter(|&a| rule.operator.holds(a, rule.threshold)))
}

#[derive(Default)]
struct Table {
    rules: BTreeMap<u64, Rule>,
    next_id: u64,
    last_fired: HashMap<u64, Timestamp>,
    /// Reading timestamps each rule has fired on, for replay suppression.
    fired_on: HashMap<u64, HashSet<i64>>,
    next_notification: u64,
}

/// The rule table and its evaluator.
///
/// One lock covers both, so evaluation is serialized and a table change
/// lands between two evaluations, never inside one.
pub struct RuleEngine {
    table: Mutex<Table>,
    path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Saved {
    next_id: u64,
    rules: Vec<Rule>,
}

impl RuleEngine {
    pub fn in_memory() -> RuleEngine {
        RuleEngine {
            table: Mutex::new(Table {
                next_id: 1,
                next_notification: 1,
                ..Default::default()
            }),
            path: None,
        }
    }

    /// Loads `path` if it exists and saves every change back to it.
    pub fn persistent(path: impl Into<PathBuf>) -> anyhow::Result<RuleEngine> {
        let path = path.into();
        let engine = RuleEngine {
            path: Some(path.clone()),
            ..RuleEngine::in_memory()
        };
        if let Some(saved) = persist::load_json::<Saved>(&path)? {
            let mut t = engine.table.lock().expect("rule table poisoned");
            t.next_id = saved.next_id;
            t.rules = saved.rules.into_iter().map(|r| (r.id, r)).collect();
        }
        Ok(engine)
    }

    fn save(&self, t: &Table) -> Result<(), RuleError> {
        if let Some(path) = &self.path {
            let saved = Saved {
                next_id: t.next_id,
                rules: t.rules.values().cloned().collect(),
            };
            persist::save_json(path, &saved).map_err(|e| invalid("storage", e.to_string()))?;
        }
        Ok(())
    }

    pub fn create(&self, owner: &str, spec: RuleSpec) -> Result<Rule, RuleError> {
        spec.validate()?;
        let mut t = self.table.lock().expect("rule table poisoned");
        let rule = Rule {
            id: t.next_id,
            owner: owner.to_owned(),
            spec,
        };
        t.next_id += 1;
        t.rules.insert(rule.id, rule.clone());
        self.save(&t)?;
        Ok(rule)
    }

    pub fn replace(&self, id: u64, spec: RuleSpec) -> Result<Rule, RuleError> {
        spec.validate()?;
        let mut t = self.table.lock().expect("rule table poisoned");
        let rule = t.rules.get_mut(&id).ok_or(RuleError::NotFound(id))?;
        rule.spec = spec;
        let rule = rule.clone();
        self.save(&t)?;
        Ok(rule)
    }

    pub fn set_enabled(&self, id: u64, enabled: bool) -> Result<Rule, RuleError> {
        let spec = self.get(id).ok_or(RuleError::NotFound(id))?.spec;
        self.replace(id, RuleSpec { enabled, ..spec })
    }

    pub fn delete(&self, id: u64) -> Result<Rule, RuleError> {
        let mut t = self.table.lock().expect("rule table poisoned");
        let rule = t.rules.remove(&id).ok_or(RuleError::NotFound(id))?;
        t.last_fired.remove(&id);
        t.fired_on.remove(&id);
        self.save(&t)?;
        Ok(rule)
    }

    pub fn get(&self, id: u64) -> Option<Rule> {
        self.table.lock().expect("rule table poisoned").rules.get(&id).cloned()
    }

    pub fn list(&self) -> Vec<Rule> {
        self.table.lock().expect("rule table poisoned").rules.values().cloned().collect()
    }

    /// Evaluates every enabled rule bound to one of the reading's series.
    ///
    /// `values` is what the reading carried, already stored. A rule that has
    /// fired on this reading timestamp before, or that fired less than its
    /// cooldown away from it, is skipped. Deliveries are left empty.
    pub fn evaluate(
        &self,
        device_id: &str,
        timestamp: Timestamp,
        values: &[(&str, f64)],
        store: &Store,
    ) -> Result<Vec<Notification>, StoreError> {
        let mut t = self.table.lock().expect("rule table poisoned");
        let mut fired = Vec::new();
        let candidates: Vec<Rule> = t
            .rules
            .values()
            .filter(|r| r.spec.enabled && r.spec.device_id == device_id)
            .cloned()
            .collect();
        for rule in candidates {
            let Some(&(_, value)) = values.iter().find(|(m, _)| *m == rule.spec.metric) else { continue };
            if t.fired_on.get(&rule.id).map_or(false, |s| s.contains(&timestamp.micros())) {
                continue;
            }
            let cooldown = rule.spec.cooldown();
            if let Some(&last) = t.last_fired.get(&rule.id) {
                let gap = (timestamp.micros() - last.micros()).abs();
                if cooldown.micros() > 0 && gap < cooldown.micros() {
                    continue;
                }
            }
            let observed = match rule.spec.kind {
                RuleKind::Instant => eval_instant(&rule.spec, value).then_some(value),
                RuleKind::Cumulative => eval_cumulative(&rule.spec, store, timestamp)?,
            };
            let Some(observed) = observed else { continue };
            t.last_fired.insert(rule.id, timestamp);
            t.fired_on.entry(rule.id).or_default().insert(timestamp.micros());
            let id = t.next_notification;
            t.next_notification += 1;
            fired.push(Notification::new(id, &rule, observed, timestamp));
        }
        Ok(fired)
    }
}
