//! Prototypical-network core: episodes, prototypes, posteriors, training and
//! collective class prototypes.

mod ccp;
mod episodes;
mod proto;
mod train;

pub use ccp::{
    average_prototypes, build_ccp, load_ccp, save_ccp, CCPBank, CcpProvenance, CCP_FORMAT_VERSION,
};
pub use episodes::{sample_episodes, Episode};
pub use proto::{
    argmax_rows, argmin_rows, class_posterior, classify, compute_prototypes, distances,
    episode_loss, sq_distances, DistanceKind, EpisodeObjective, EpisodeOutcome, LossValue,
    PrototypeBank, PrototypeSet, PROB_FLOOR,
};
pub use train::{
    episode_prototypes, train, EpisodeRecord, EpochRecord, SnapshotMode, TrainConfig, TrainLog,
};
