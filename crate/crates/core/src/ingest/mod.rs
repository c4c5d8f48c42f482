//! Usage-log parsing, cleaning, sessionization, prediction instances,
//! dataset splits and synthetic corpora.

mod instances;
mod parse;
mod sessions;
mod split;
mod synth;

pub use instances::{
    format_instance, make_instances, parse_instances, reconstruct_sessions, write_instances, AppVocab,
    PredictionInstance, PAD,
};
pub use parse::{parse_events, parse_poi, Event, ParsedLog, RowError};
pub use sessions::{
    filter_users, hour_of_day, merge_consecutive, segment_sessions, Segmented, Session, SessionConfig,
    MAX_SESSION_LEN, MERGE_GAP_SECS, MIN_USER_EVENTS,
};
pub use split::{reindex_by_train, split_coldstart, split_standard, DatasetSplit, Reindexed, SplitMode};
pub use synth::{
    app_name, format_annotations, format_events, format_poi, station_name, synth_generate, Annotation,
    Routine, StationSpec, SynthConfig, SynthOutput,
};
