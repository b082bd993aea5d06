//! Core building blocks of the tipcut replicated state machine: codec,
//! execution, commitments, storage, data dissemination and consensus.

pub mod commitment;
pub mod consensus;
pub mod crypto;
pub mod executor;
pub mod lane;
pub mod state_machine;
pub mod storage;
pub mod tx_codec;
pub mod types;
