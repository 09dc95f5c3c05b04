//! Slow, direct reference implementations used to check the library, plus
//! the random problem generators the acceptance suite draws from.
//! The oracles share nothing with `engage-core` beyond its data types.

pub mod harness;
pub mod oracles;

#[cfg(test)]
mod examples;
