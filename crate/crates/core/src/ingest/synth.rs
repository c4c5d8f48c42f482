//! Synthetic usage logs built from weighted app routines plus noise.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::parse::Event;
use crate::error::{Error, Result};

/// An ordered app motif, app indices in `0..apps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routine {
    pub apps: Vec<usize>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub count: usize,
    pub poi_dim: usize,
    /// Upper bound (exclusive) of each POI count.
    #[serde(default = "default_poi_max")]
    pub poi_max: u32,
}

fn default_poi_max() -> u32 {
    20
}

/// Generator configuration, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub apps: usize,
    /// Inclusive `[min, max]` sessions per user.
    pub sessions_per_user: [usize; 2],
    /// Inclusive `[min, max]` routines per session.
    #[serde(default = "default_motifs_per_session")]
    pub motifs_per_session: [usize; 2],
    pub routines: Vec<Routine>,
    /// Probability that a routine step is replaced by a uniformly drawn app.
    pub noise_rate: f64,
    #[serde(default)]
    pub stations: Option<StationSpec>,
    #[serde(default = "default_start")]
    pub start_timestamp: i64,
}

fn default_motifs_per_session() -> [usize; 2] {
    [1, 3]
}

fn default_start() -> i64 {
    1_460_937_600
}

/// Ground truth for one generated event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub user_id: String,
    pub timestamp: i64,
    /// Index of the routine the step belongs to.
    pub routine: usize,
    /// Position within the routine.
    pub position: usize,
    /// True when the routine's app was replaced by noise.
    pub noise: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthOutput {
    pub events: Vec<Event>,
    pub annotations: Vec<Annotation>,
    pub poi: Vec<(String, Vec<f64>)>,
}

pub fn app_name(i: usize) -> String {
    format!("app{i:03}")
}

pub fn station_name(i: usize) -> String {
    format!("bs{i:03}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.routines.is_empty() {
            return Err(Error::config("routines", "routine library is empty"));
        }
        if self.users == 0 {
            return Err(Error::config("users", "must be >= 1"));
        }
        if self.apps < 2 {
            return Err(Error::config("apps", "must be >= 2"));
        }
        for (name, [lo, hi]) in [
            ("sessions_per_user", self.sessions_per_user),
            ("motifs_per_session", self.motifs_per_session),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(name, format!("invalid range [{lo}, {hi}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate", "must lie in [0, 1]"));
        }
        for (i, r) in self.routines.iter().enumerate() {
            if !(2..=4).contains(&r.apps.len()) {
                return Err(Error::config(format!("routines[{i}]"), "length must be 2 to 4"));
            }
            if r.apps.iter().any(|&a| a >= self.apps) {
                return Err(Error::config(format!("routines[{i}]"), "app index out of range"));
            }
            if r.apps.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config(format!("routines[{i}]"), "repeated consecutive app"));
            }
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::config(format!("routines[{i}]"), "weight must be positive"));
            }
        }
        if let Some(st) = &self.stations {
            if st.count == 0 || st.poi_dim == 0 || st.poi_max == 0 {
                return Err(Error::config("stations", "count, poi_dim and poi_max must be >= 1"));
            }
        }
        Ok(())
    }
}

fn noise_app<R: Rng>(rng: &mut R, apps: usize, prev: Option<usize>) -> usize {
    loop {
        let a = rng.random_range(0..apps);
        if Some(a) != prev {
            return a;
        }
    }
}

/// Generates a reproducible log. Sessions are separated by at least an hour
/// and in-session gaps stay within two minutes, so sessionization recovers
/// exactly the generated sessions.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightedIndex::new(config.routines.iter().map(|r| r.weight))
        .map_err(|e| Error::config("routines", e.to_string()))?;

    let mut out = SynthOutput::default();
    if let Some(st) = &config.stations {
        for s in 0..st.count {
            let v = (0..st.poi_dim)
                .map(|_| rng.random_range(0..st.poi_max) as f64)
                .collect();
            out.poi.push((station_name(s), v));
        }
    }

    for u in 0..config.users {
        let user_id = format!("u{u:04}");
        let mut t = config.start_timestamp + rng.random_range(0..3_600);
        let [smin, smax] = config.sessions_per_user;
        for _ in 0..rng.random_range(smin..=smax) {
            let station = config
                .stations
                .as_ref()
                .map(|st| station_name(rng.random_range(0..st.count)));
            let [mmin, mmax] = config.motifs_per_session;
            let mut prev: Option<usize> = None;
            for _ in 0..rng.random_range(mmin..=mmax) {
                let routine = weights.sample(&mut rng);
                for (position, &app) in config.routines[routine].apps.iter().enumerate() {
                    let noisy = rng.random::<f64>() < config.noise_rate;
                    let app = if noisy {
                        noise_app(&mut rng, config.apps, prev)
                    } else {
                        app
                    };
                    if prev == Some(app) {
                        // a routine starting with the previous app would be merged away
                        continue;
                    }
                    out.events.push(Event {
                        user_id: user_id.clone(),
                        timestamp: t,
                        app_id: app_name(app),
                        station_id: station.clone(),
                    });
                    out.annotations.push(Annotation {
                        user_id: user_id.clone(),
                        timestamp: t,
                        routine,
                        position,
                        noise: noisy,
                    });
                    prev = Some(app);
                    t += rng.random_range(10..=120);
                }
            }
            t += rng.random_range(3_600..=14_400);
        }
    }
    Ok(out)
}

/// Event log rows `user_id,timestamp,app_id[,station_id]`.
pub fn format_events(events: &[Event]) -> String {
    let mut s = String::new();
    for e in events {
        write!(s, "{},{},{}", e.user_id, e.timestamp, e.app_id).unwrap();
        if let Some(st) = &e.station_id {
            write!(s, ",{st}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// `user_id,timestamp,routine,position,noise` rows.
pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        writeln!(
            s,
            "{},{},{},{},{}",
            a.user_id, a.timestamp, a.routine, a.position, a.noise as u8
        )
        .unwrap();
    }
    s
}

/// `station_id,x_1,...,x_M` rows.
pub fn format_poi(poi: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (id, v) in poi {
        s.push_str(id);
        for x in v {
            write!(s, ",{x}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config(noise: f64) -> SynthConfig {
        SynthConfig {
            users: 3,
            apps: 10,
            sessions_per_user: [5, 8],
            motifs_per_session: [1, 3],
            routines: vec![
                Routine { apps: vec![0, 1, 2], weight: 1.0 },
                Routine { apps: vec![3, 4, 5, 6], weight: 2.0 },
            ],
            noise_rate: noise,
            stations: Some(StationSpec { count: 4, poi_dim: 3, poi_max: 10 }),
            start_timestamp: 1_000_000,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_generate(&config(0.3), 9).unwrap();
        let b = synth_generate(&config(0.3), 9).unwrap();
        assert_eq!(format_events(&a.events), format_events(&b.events));
        assert_eq!(format_annotations(&a.annotations), format_annotations(&b.annotations));
        let c = synth_generate(&config(0.3), 10).unwrap();
        assert_ne!(format_events(&a.events), format_events(&c.events));
    }

    #[test]
    fn empty_library_fails() {
        let mut cfg = config(0.0);
        cfg.routines.clear();
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn invalid_routines_rejected() {
        let mut cfg = config(0.0);
        cfg.routines.push(Routine { apps: vec![1], weight: 1.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = config(0.0);
        cfg.routines.push(Routine { apps: vec![1, 1], weight: 1.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = config(0.0);
        cfg.routines.push(Routine { apps: vec![1, 99], weight: 1.0 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn no_noise_reproduces_routines() {
        let out = synth_generate(&config(0.0), 3).unwrap();
        for (e, a) in out.events.iter().zip(&out.annotations) {
            assert!(!a.noise);
            let expected = config(0.0).routines[a.routine].apps[a.position];
            assert_eq!(e.app_id, app_name(expected));
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = config(0.1);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let minimal: SynthConfig = serde_json::from_str(
            r#"{"users":1,"apps":3,"sessions_per_user":[1,1],"routines":[{"apps":[0,1]}],"noise_rate":0}"#,
        )
        .unwrap();
        assert_eq!(minimal.routines[0].weight, 1.0);
        assert!(minimal.stations.is_none());
    }
}
