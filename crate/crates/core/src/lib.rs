pub mod kvstore;
pub mod loadgen;
pub mod protocol;
pub mod runtime;
pub mod shardctl;
