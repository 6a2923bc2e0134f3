//! Broker addresses and topic filters.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MqttUrl {
    pub host: String,
    pub port: u16,
}

impl MqttUrl {
    /// `mqtt://host[:port]` or bare `host[:port]`; the port defaults to 1883.
    pub fn parse(url: &str) -> anyhow::Result<MqttUrl> {
        let rest = url.strip_prefix("mqtt://").or_else(|| url.strip_prefix("tcp://")).unwrap_or(url);
        let rest = rest.trim_end_matches('/');
        let (host, port) = match rest.rsplit_once(':') {
            Some((h, p)) => (h, p.parse().map_err(|_| anyhow::anyhow!("bad port in {url:?}"))?),
            None => (rest, 1883),
        };
        if host.is_empty() {
            anyhow::bail!("no host in {url:?}");
        }
        Ok(MqttUrl {
            host: host.to_owned(),
            port,
        })
    }
}

/// MQTT topic filter match with `+` and a trailing `#`.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}
