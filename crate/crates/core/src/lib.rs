pub mod bench;
pub mod crypto;
pub mod defense;
pub mod error;
pub mod guard;
pub mod iee;
pub mod nn;
pub mod protocol;
pub mod storage;

mod codec;

pub use error::{Error, Result};
