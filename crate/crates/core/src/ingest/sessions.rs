use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::parse::Event;

/// Gap below which consecutive records of the same app are merged.
pub const MERGE_GAP_SECS: i64 = 300;
/// Minimum number of post-merge events a user needs to be kept.
pub const MIN_USER_EVENTS: usize = 50;
/// Sessions longer than this are treated as noise.
pub const MAX_SESSION_LEN: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Inactivity threshold in seconds; a gap `<= delta_t` stays in-session.
    pub delta_t: i64,
    pub max_len: usize,
    /// Added to timestamps before taking the hour of day.
    pub utc_offset_secs: i64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            delta_t: 300,
            max_len: MAX_SESSION_LEN,
            utc_offset_secs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user_id: String,
    pub events: Vec<Event>,
    /// Hour of day of the last event.
    pub tau: u8,
    /// Station of the last event.
    pub rho: Option<String>,
}

pub fn hour_of_day(timestamp: i64, utc_offset_secs: i64) -> u8 {
    ((timestamp + utc_offset_secs).rem_euclid(86_400) / 3_600) as u8
}

/// Collapses runs of the same app whose successive gaps are below
/// [`MERGE_GAP_SECS`] into the run's first event.
pub fn merge_consecutive(events: &[Event]) -> Vec<Event> {
    let mut out: Vec<Event> = Vec::with_capacity(events.len());
    let mut run_last_ts = i64::MIN;
    for ev in events {
        match out.last() {
            Some(head)
                if head.app_id == ev.app_id && ev.timestamp - run_last_ts < MERGE_GAP_SECS =>
            {
                run_last_ts = ev.timestamp;
            }
            _ => {
                run_last_ts = ev.timestamp;
                out.push(ev.clone());
            }
        }
    }
    out
}

/// Drops users with fewer than `min_events` events.
pub fn filter_users(
    users: BTreeMap<String, Vec<Event>>,
    min_events: usize,
) -> BTreeMap<String, Vec<Event>> {
    let was_empty = users.is_empty();
    let kept: BTreeMap<_, _> = users
        .into_iter()
        .filter(|(_, evs)| evs.len() >= min_events)
        .collect();
    if kept.is_empty() && !was_empty {
        warn!("no user has at least {min_events} events");
    }
    kept
}

/// Result of sessionizing one user's events.
#[derive(Clone, Debug, Default)]
pub struct Segmented {
    pub sessions: Vec<Session>,
    pub dropped_long: usize,
    /// Equal consecutive apps found inside a session. They indicate records
    /// that escaped merging and are collapsed here.
    pub repeat_violations: usize,
}

/// Splits a user's sorted events wherever the gap exceeds `delta_t`.
pub fn segment_sessions(events: &[Event], config: &SessionConfig) -> Segmented {
    let mut out = Segmented::default();
    let mut current: Vec<Event> = Vec::new();
    let flush = |current: &mut Vec<Event>, out: &mut Segmented| {
        if current.is_empty() {
            return;
        }
        if current.len() > config.max_len {
            out.dropped_long += 1;
            current.clear();
            return;
        }
        let events = std::mem::take(current);
        let last = events.last().expect("nonempty");
        out.sessions.push(Session {
            user_id: last.user_id.clone(),
            tau: hour_of_day(last.timestamp, config.utc_offset_secs),
            rho: last.station_id.clone(),
            events,
        });
    };
    let mut last_ts: Option<i64> = None;
    for ev in events {
        let gap = last_ts.map(|t| ev.timestamp - t);
        last_ts = Some(ev.timestamp);
        if gap.is_some_and(|g| g > config.delta_t) {
            flush(&mut current, &mut out);
        } else if current.last().is_some_and(|prev| prev.app_id == ev.app_id) {
            out.repeat_violations += 1;
            continue;
        }
        current.push(ev.clone());
    }
    flush(&mut current, &mut out);
    if out.repeat_violations > 0 {
        warn!(
            "{} consecutive repeated apps inside sessions were collapsed",
            out.repeat_violations
        );
    }
    out
}
