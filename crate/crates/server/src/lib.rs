//! The sensor wallet service: uplink ingest, rules and notifications,
//! downlink queue, model serving and the HTTP API.

pub mod api;
pub mod app;
pub mod auth;
pub mod config;
pub mod dataset;
pub mod downlink;
pub mod ingest;
pub mod mqtt;
pub mod notify;
pub mod online;
pub mod persist;
pub mod pipeline;
pub mod rules;
pub mod sensors;
