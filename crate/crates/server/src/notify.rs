//! Notifications and the sinks that deliver them.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration as StdDuration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use wallet_core::Timestamp;

use crate::rules::{Operator, Rule, RuleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Delivery {
    Pending,
    Delivered,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub id: u64,
    pub rule_id: u64,
    pub owner: String,
    pub device_id: String,
    pub metric: String,
    pub kind: RuleKind,
    pub operator: Operator,
    pub threshold: f64,
    /// The value or aggregate that satisfied the rule.
    pub value: f64,
    /// Timestamp of the reading that fired the rule.
    pub fired_at: Timestamp,
    pub message: String,
    pub deliveries: BTreeMap<String, Delivery>,
}

impl Notification {
    pub fn new(id: u64, rule: &Rule, value: f64, fired_at: Timestamp) -> Notification {
        let s = &rule.spec;
        let subject = match s.kind {
            RuleKind::Instant => s.metric.clone(),
            RuleKind::Cumulative => format!("{:?} of {} over {} s", s.aggregation, s.metric, s.period_secs.unwrap_or(0)).to_lowercase(),
        };
        Notification {
            id,
            rule_id: rule.id,
            owner: rule.owner.clone(),
            device_id: s.device_id.clone(),
            metric: s.metric.clone(),
            kind: s.kind,
            operator: s.operator,
            threshold: s.threshold,
            value,
            fired_at,
            message: format!("{}: {subject} is {value} ({} {})", s.device_id, s.operator.symbol(), s.threshold),
            deliveries: BTreeMap::new(),
        }
    }

    /// Body POSTed by the webhook sink.
    pub fn webhook_payload(&self) -> serde_json::Value {
        json!({
            "rule_id": self.rule_id,
            "device_id": self.device_id,
            "metric": self.metric,
            "value": self.value,
            "threshold": self.threshold,
            "fired_at": self.fired_at.to_rfc3339(),
        })
    }
}

pub trait NotificationSink: Send + Sync {
    fn name(&self) -> &str;
    fn deliver(&self, n: &Notification) -> Result<(), String>;
}

/// Writes each notification to the log at warn level.
pub struct LogSink;

impl NotificationSink for LogSink {
    fn name(&self) -> &str {
        "log"
    }

    fn deliver(&self, n: &Notification) -> Result<(), String> {
        log::warn!("rule {} fired: {}", n.rule_id, n.message);
        Ok(())
    }
}

/// POSTs the JSON payload, retrying with exponential backoff.
pub struct WebhookSink {
    name: String,
    url: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: StdDuration,
}

impl WebhookSink {
    pub fn new(name: impl Into<String>, url: impl Into<String>) -> WebhookSink {
        WebhookSink {
            name: name.into(),
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(StdDuration::from_secs(10)).build(),
            retries: 3,
            backoff: StdDuration::from_secs(1),
        }
    }

    /// Retry count and first backoff delay; each retry doubles the delay.
    pub fn with_retry(mut self, retries: u32, backoff: StdDuration) -> WebhookSink {
        self.retries = retries;
        self.backoff = backoff;
        self
    }
}

impl NotificationSink for WebhookSink {
    fn name(&self) -> &str {
        &self.name
    }

    fn deliver(&self, n: &Notification) -> Result<(), String> {
        let body = n.webhook_payload();
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.agent.post(&self.url).send_json(&body) {
                Ok(_) => return Ok(()),
                Err(e) if attempt >= self.retries => return Err(e.to_string()),
                Err(e) => {
                    log::debug!("webhook {} attempt {} failed: {e}", self.name, attempt + 1);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// Runs every sink on its own thread and records each outcome. A failing or
/// slow sink never holds up another.
pub fn deliver_all(sinks: &[Arc<dyn NotificationSink>], n: &mut Notification) {
    let outcomes: Vec<(String, Delivery)> = thread::scope(|s| {
        let handles: Vec<_> = sinks
            .iter()
            .map(|sink| {
                let n = &*n;
                s.spawn(move || {
                    let status = match sink.deliver(n) {
                        Ok(()) => Delivery::Delivered,
                        Err(error) => Delivery::Failed { error },
                    };
                    (sink.name().to_owned(), status)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sink panicked")).collect()
    });
    n.deliveries.extend(outcomes);
}

/// Most recent notifications, newest last.
pub struct NotificationLog {
    entries: Mutex<VecDeque<Notification>>,
    capacity: usize,
}

impl NotificationLog {
    pub fn new(capacity: usize) -> NotificationLog {
        NotificationLog {
            entries: Mutex::new(VecDeque::new()),
            capacity,
        }
    }

    pub fn push(&self, n: Notification) {
        let mut e = self.entries.lock().expect("notification log poisoned");
        if e.len() == self.capacity {
            e.pop_front();
        }
        e.push_back(n);
    }

    pub fn set_delivery(&self, id: u64, sink: &str, status: Delivery) {
        let mut e = self.entries.lock().expect("notification log poisoned");
        if let Some(n) = e.iter_mut().rev().find(|n| n.id == id) {
            n.deliveries.insert(sink.to_owned(), status);
        }
    }

    pub fn snapshot(&self) -> Vec<Notification> {
        self.entries.lock().expect("notification log poisoned").iter().cloned().collect()
    }
}

/// Background delivery: one worker thread and queue per sink, so a sink
/// stuck in retries delays only its own later notifications.
pub struct Dispatcher {
    queues: Mutex<Vec<mpsc::Sender<Notification>>>,
    sink_names: Vec<String>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
    log: Arc<NotificationLog>,
}

impl Dispatcher {
    pub fn start(sinks: Vec<Arc<dyn NotificationSink>>, log: Arc<NotificationLog>) -> Dispatcher {
        let mut queues = Vec::new();
        let mut workers = Vec::new();
        let sink_names = sinks.iter().map(|s| s.name().to_owned()).collect();
        for sink in sinks {
            let (tx, rx) = mpsc::channel::<Notification>();
            let log = log.clone();
            queues.push(tx);
            workers.push(
                thread::Builder::new()
                    .name(format!("sink-{}", sink.name()))
                    .spawn(move || {
                        for n in rx {
                            let status = match sink.deliver(&n) {
                                Ok(()) => Delivery::Delivered,
                                Err(error) => {
                                    log::error!("sink {} failed for notification {}: {error}", sink.name(), n.id);
                                    Delivery::Failed { error }
                                }
                            };
                            log.set_delivery(n.id, sink.name(), status);
                        }
                    })
                    .expect("spawn sink worker"),
            );
        }
        Dispatcher {
            queues: Mutex::new(queues),
            sink_names,
            workers: Mutex::new(workers),
            log,
        }
    }

    pub fn log(&self) -> &Arc<NotificationLog> {
        &self.log
    }

    pub fn dispatch(&self, mut n: Notification) {
        for name in &self.sink_names {
            n.deliveries.insert(name.clone(), Delivery::Pending);
        }
        self.log.push(n.clone());
        for q in self.queues.lock().expect("dispatcher poisoned").iter() {
            let _ = q.send(n.clone());
        }
    }

    /// Drains the queues and stops the workers.
    pub fn shutdown(&self) {
        self.queues.lock().expect("dispatcher poisoned").clear();
        for w in self.workers.lock().expect("dispatcher poisoned").drain(..) {
            let _ = w.join();
        }
    }
}
