//! Downlink command queue, its transports and the delivery worker.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration as StdDuration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wallet_core::downlink::{DownlinkCommand, DownlinkError, DownlinkKind, DownlinkState};
use wallet_core::sim::DownlinkSource;
use wallet_core::Timestamp;

use crate::mqtt::MqttUrl;
use crate::persist;

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error(transparent)]
    Command(#[from] DownlinkError),
    #[error("downlink {0} not found")]
    NotFound(u64),
    #[error("saving downlinks: {0}")]
    Storage(String),
}

pub trait DownlinkTransport: Send + Sync {
    fn publish(&self, cmd: &DownlinkCommand) -> Result<(), String>;
}

#[derive(Default, Serialize, Deserialize)]
struct QueueState {
    next_id: u64,
    commands: BTreeMap<u64, DownlinkCommand>,
}

/// Every command ever enqueued, keyed by id. State changes go through
/// [`DownlinkCommand::advance`], so no command skips or reverses a state.
pub struct DownlinkQueue {
    state: Mutex<QueueState>,
    path: Option<PathBuf>,
}

impl DownlinkQueue {
    pub fn in_memory() -> DownlinkQueue {
        DownlinkQueue {
            state: Mutex::new(QueueState {
                next_id: 1,
                commands: BTreeMap::new(),
            }),
            path: None,
        }
    }

    pub fn persistent(path: impl Into<PathBuf>) -> anyhow::Result<DownlinkQueue> {
        let path = path.into();
        let state = persist::load_json(&path)?.unwrap_or(QueueState {
            next_id: 1,
            commands: BTreeMap::new(),
        });
        Ok(DownlinkQueue {
            state: Mutex::new(state),
            path: Some(path),
        })
    }

    fn save(&self, s: &QueueState) -> Result<(), QueueError> {
        if let Some(path) = &self.path {
            persist::save_json(path, s).map_err(|e| QueueError::Storage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn enqueue(
        &self,
        device_id: &str,
        port: u8,
        kind: DownlinkKind,
        payload: Vec<u8>,
        now: Timestamp,
    ) -> Result<DownlinkCommand, QueueError> {
        let mut s = self.state.lock().expect("downlink queue poisoned");
        let cmd = DownlinkCommand::new(s.next_id, device_id, port, kind, payload, now)?;
        s.next_id += 1;
        s.commands.insert(cmd.id, cmd.clone());
        self.save(&s)?;
        Ok(cmd)
    }

    pub fn get(&self, id: u64) -> Option<DownlinkCommand> {
        self.state.lock().expect("downlink queue poisoned").commands.get(&id).cloned()
    }

    pub fn list(&self, device_id: &str) -> Vec<DownlinkCommand> {
        let s = self.state.lock().expect("downlink queue poisoned");
        s.commands.values().filter(|c| c.device_id == device_id).cloned().collect()
    }

    fn transition(&self, id: u64, next: DownlinkState, now: Timestamp) -> Result<DownlinkCommand, QueueError> {
        let mut s = self.state.lock().expect("downlink queue poisoned");
        let cmd = s.commands.get_mut(&id).ok_or(QueueError::NotFound(id))?;
        cmd.advance(next, now)?;
        let cmd = cmd.clone();
        self.save(&s)?;
        Ok(cmd)
    }

    /// Device report for a sent command.
    pub fn ack(&self, id: u64, ok: bool, now: Timestamp) -> Result<DownlinkCommand, QueueError> {
        let next = if ok { DownlinkState::Acked } else { DownlinkState::Failed };
        self.transition(id, next, now)
    }

    /// Hands every pending command to the transport in id order. A command
    /// the transport refuses stays pending for the next pass.
    pub fn worker_pass(&self, transport: &dyn DownlinkTransport, now: Timestamp) -> usize {
        let pending: Vec<DownlinkCommand> = {
            let s = self.state.lock().expect("downlink queue poisoned");
            s.commands.values().filter(|c| c.state == DownlinkState::Pending).cloned().collect()
        };
        let mut sent = 0;
        for cmd in pending {
            match transport.publish(&cmd) {
                Ok(()) => match self.transition(cmd.id, DownlinkState::Sent, now) {
                    Ok(_) => sent += 1,
                    Err(e) => log::error!("downlink {}: {e}", cmd.id),
                },
                Err(e) => log::warn!("downlink {} to {} not published: {e}", cmd.id, cmd.device_id),
            }
        }
        sent
    }
}

/// Commands waiting for simulated devices to pick them up.
#[derive(Default)]
pub struct SimOutbox {
    waiting: Mutex<Vec<DownlinkCommand>>,
}

impl SimOutbox {
    pub fn take_for(&self, device_id: &str) -> Vec<DownlinkCommand> {
        let mut w = self.waiting.lock().expect("sim outbox poisoned");
        let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut *w).into_iter().partition(|c| c.device_id == device_id);
        *w = rest;
        mine
    }
}

impl DownlinkTransport for SimOutbox {
    fn publish(&self, cmd: &DownlinkCommand) -> Result<(), String> {
        self.waiting.lock().expect("sim outbox poisoned").push(cmd.clone());
        Ok(())
    }
}

/// Connects a simulated device to the queue: it receives what the worker
/// sent and its acknowledgements settle the commands.
pub struct SimLink {
    pub outbox: Arc<SimOutbox>,
    pub queue: Arc<DownlinkQueue>,
    last_poll: Timestamp,
}

impl SimLink {
    pub fn new(outbox: Arc<SimOutbox>, queue: Arc<DownlinkQueue>) -> SimLink {
        SimLink {
            outbox,
            queue,
            last_poll: Timestamp::from_micros(0),
        }
    }
}

impl DownlinkSource for SimLink {
    fn poll(&mut self, device_id: &str, now: Timestamp) -> Vec<DownlinkCommand> {
        self.last_poll = now;
        self.outbox.take_for(device_id)
    }

    fn ack(&mut self, command_id: u64, ok: bool) {
        if let Err(e) = self.queue.ack(command_id, ok, self.last_poll) {
            log::warn!("ack for downlink {command_id}: {e}");
        }
    }
}

/// TTN-style publish of `{"port", "confirmed", "payload_raw"}` to
/// `{app_id}/devices/{dev_id}/down`. Delivery beyond the broker is not
/// observed, so commands stay `sent`.
pub struct MqttTransport {
    client: rumqttc::Client,
    app_id: String,
}

impl MqttTransport {
    pub fn connect(url: &str, app_id: &str) -> anyhow::Result<MqttTransport> {
        let url = MqttUrl::parse(url)?;
        let opts = rumqttc::MqttOptions::new(format!("wallet-down-{}", std::process::id()), url.host, url.port);
        let (client, mut connection) = rumqttc::Client::new(opts, 64);
        thread::Builder::new().name("mqtt-downlink".into()).spawn(move || {
            for event in connection.iter() {
                if let Err(e) = event {
                    log::warn!("downlink broker connection: {e}");
                    thread::sleep(StdDuration::from_secs(1));
                }
            }
        })?;
        Ok(MqttTransport {
            client,
            app_id: app_id.to_owned(),
        })
    }

    pub fn topic(app_id: &str, device_id: &str) -> String {
        format!("{app_id}/devices/{device_id}/down")
    }
}

impl DownlinkTransport for MqttTransport {
    fn publish(&self, cmd: &DownlinkCommand) -> Result<(), String> {
        let body = json!({
            "port": cmd.port,
            "confirmed": false,
            "payload_raw": STANDARD.encode(&cmd.payload),
        });
        self.client
            .try_publish(Self::topic(&self.app_id, &cmd.device_id), rumqttc::QoS::AtLeastOnce, false, body.to_string())
            .map_err(|e| e.to_string())
    }
}

pub struct WorkerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl WorkerHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Runs [`DownlinkQueue::worker_pass`] every `interval`.
pub fn start_worker(queue: Arc<DownlinkQueue>, transport: Arc<dyn DownlinkTransport>, interval: StdDuration) -> WorkerHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::Builder::new()
        .name("downlink-worker".into())
        .spawn(move || {
            while !flag.load(Ordering::Acquire) {
                queue.worker_pass(transport.as_ref(), Timestamp::now());
                thread::sleep(interval);
            }
        })
        .expect("spawn downlink worker");
    WorkerHandle {
        stop,
        thread: Some(thread),
    }
}
