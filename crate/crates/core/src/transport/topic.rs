use super::{HiveId, TransportError};

const PREFIX: &str = "apiary";
const SUFFIX: &str = "telemetry";

/// Concrete publish topic of the form `apiary/<hive_id>/telemetry`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Topic {
    hive_id: HiveId,
}

impl Topic {
    pub fn telemetry(hive_id: HiveId) -> Self {
        Self { hive_id }
    }

    pub fn hive_id(&self) -> &HiveId {
        &self.hive_id
    }

    pub fn parse(s: &str) -> Result<Self, TransportError> {
        let mut parts = s.split('/');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(PREFIX), Some(id), Some(SUFFIX), None) => HiveId::new(id)
                .map(Self::telemetry)
                .map_err(|_| TransportError::InvalidTopic(s.to_string())),
            _ => Err(TransportError::InvalidTopic(s.to_string())),
        }
    }
}

impl std::fmt::Display for Topic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{PREFIX}/{}/{SUFFIX}", self.hive_id)
    }
}

/// MQTT-style subscription filter: `+` matches one level, a trailing `#`
/// matches any remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    levels: Vec<String>,
}

impl TopicFilter {
    /// Matches the telemetry topic of every hive.
    pub fn all_telemetry() -> Self {
        Self::parse("apiary/+/telemetry").expect("static filter")
    }

    pub fn parse(s: &str) -> Result<Self, TransportError> {
        let levels: Vec<String> = s.split('/').map(str::to_string).collect();
        let bad = levels.iter().enumerate().any(|(i, l)| {
            (l.contains('#') && (l != "#" || i + 1 != levels.len())) || (l.contains('+') && l != "+")
        });
        if s.is_empty() || bad {
            return Err(TransportError::InvalidTopic(s.to_string()));
        }
        Ok(Self { levels })
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut parts = topic.split('/');
        for level in &self.levels {
            if level == "#" {
                return true;
            }
            match parts.next() {
                Some(p) if level == "+" || level == p => {}
                _ => return false,
            }
        }
        parts.next().is_none()
    }
}

impl std::fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.levels.join("/"))
    }
}
