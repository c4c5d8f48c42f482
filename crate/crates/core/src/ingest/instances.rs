use std::collections::HashMap;
use std::fmt::Write as _;

use super::sessions::Session;
use crate::error::{Error, Result};

/// Padding index; real apps start at 1.
pub const PAD: u32 = 0;

/// Bidirectional app-name index. Index 0 is reserved for [`PAD`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppVocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl AppVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut v = Self::new();
        for n in names {
            v.intern(&n);
        }
        v
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        let i = self.names.len() as u32;
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: u32) -> Option<&str> {
        (index as usize)
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    /// Number of real apps.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One next-app prediction example.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInstance {
    pub user_id: String,
    /// Exactly `T` app indices, left-padded with [`PAD`].
    pub window: Vec<u32>,
    pub window_len: usize,
    pub target: u32,
    pub tau: u8,
    pub rho_category: Option<u32>,
    /// Time of the target event; zero when read back from an instance file.
    pub timestamp: i64,
}

impl PredictionInstance {
    /// The non-padded tail of the window, oldest first.
    pub fn apps(&self) -> &[u32] {
        &self.window[self.window.len() - self.window_len..]
    }

    pub fn last_app(&self) -> u32 {
        *self.window.last().expect("window is never empty")
    }

    pub fn validate(&self, window: usize, num_apps: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("instance", msg));
        if self.window.len() != window {
            return fail(format!("window has {} entries, expected {window}", self.window.len()));
        }
        if self.window_len == 0 || self.window_len > window {
            return fail(format!("window_len {} outside 1..={window}", self.window_len));
        }
        let pad = window - self.window_len;
        if self.window[..pad].iter().any(|&a| a != PAD) || self.apps().contains(&PAD) {
            return fail("padding must be exactly the leading entries".into());
        }
        if self.target == PAD || self.target as usize > num_apps {
            return fail(format!("target {} outside 1..={num_apps}", self.target));
        }
        if let Some(&bad) = self.apps().iter().find(|&&a| a as usize > num_apps) {
            return fail(format!("app {bad} outside 1..={num_apps}"));
        }
        if self.tau > 23 {
            return fail(format!("tau {} outside 0..=23", self.tau));
        }
        Ok(())
    }
}

/// One instance for every session position `j >= 2`: the target is event
/// `j` and the window holds the up-to-`window` events before it. Context
/// (hour of day, station category) comes from event `j - 1`.
pub fn make_instances<F>(
    sessions: &[Session],
    window: usize,
    vocab: &mut AppVocab,
    station_category: F,
    utc_offset_secs: i64,
) -> Vec<PredictionInstance>
where
    F: Fn(&str) -> Option<u32>,
{
    let mut out = Vec::new();
    for session in sessions {
        let apps: Vec<u32> = session.events.iter().map(|e| vocab.intern(&e.app_id)).collect();
        for j in 1..apps.len() {
            let start = j.saturating_sub(window);
            let history = &apps[start..j];
            let mut w = vec![PAD; window - history.len()];
            w.extend_from_slice(history);
            let prev = &session.events[j - 1];
            out.push(PredictionInstance {
                user_id: session.user_id.clone(),
                window: w,
                window_len: history.len(),
                target: apps[j],
                tau: super::sessions::hour_of_day(prev.timestamp, utc_offset_secs),
                rho_category: prev.station_id.as_deref().and_then(&station_category),
                timestamp: session.events[j].timestamp,
            });
        }
    }
    out
}

/// Rebuilds the app sequences of the sessions a run of instances was cut
/// from. A new sequence starts at a user change, at a length-1 window, or
/// wherever an instance does not continue the previous one.
pub fn reconstruct_sessions(instances: &[PredictionInstance]) -> Vec<(String, Vec<u32>)> {
    let mut out: Vec<(String, Vec<u32>)> = Vec::new();
    let mut prev: Option<&PredictionInstance> = None;
    for inst in instances {
        let continues = prev.is_some_and(|p| {
            p.user_id == inst.user_id && inst.window_len > 1 && inst.last_app() == p.target
        });
        if continues {
            out.last_mut().expect("open session").1.push(inst.target);
        } else {
            let mut seq = inst.apps().to_vec();
            seq.push(inst.target);
            out.push((inst.user_id.clone(), seq));
        }
        prev = Some(inst);
    }
    out
}

/// `user_id|w_1 ... w_T|target|tau|rho_category`, `-` for a missing category.
pub fn format_instance(inst: &PredictionInstance) -> String {
    let mut line = String::new();
    line.push_str(&inst.user_id);
    line.push('|');
    for (i, a) in inst.window.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{a}").unwrap();
    }
    write!(line, "|{}|{}|", inst.target, inst.tau).unwrap();
    match inst.rho_category {
        Some(c) => write!(line, "{c}").unwrap(),
        None => line.push('-'),
    }
    line
}

pub fn write_instances(instances: &[PredictionInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&format_instance(inst));
        out.push('\n');
    }
    out
}

pub fn parse_instances(text: &str, source: &str) -> Result<Vec<PredictionInstance>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('|').collect();
        let [user, window, target, tau, rho] = fields[..] else {
            return Err(err("expected 5 `|`-separated fields"));
        };
        let window: Vec<u32> = window
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err("bad window index"))?;
        let window_len = window.iter().filter(|&&a| a != PAD).count();
        if window.is_empty() || window_len == 0 {
            return Err(err("empty window"));
        }
        let inst = PredictionInstance {
            user_id: user.to_string(),
            window_len,
            target: target.parse().map_err(|_| err("bad target"))?,
            tau: tau.parse().map_err(|_| err("bad tau"))?,
            rho_category: match rho {
                "-" => None,
                r => Some(r.parse().map_err(|_| err("bad rho category"))?),
            },
            timestamp: 0,
            window,
        };
        let t = inst.window.len();
        inst.validate(t, u32::MAX as usize).map_err(|e| err(&e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}
