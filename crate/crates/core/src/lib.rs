// SPDX-License-Identifier: Apache-2.0

//! Simulation lab for data-deletion compliance.
//!
//! Collectors are run against scripted environments and requesters in a
//! real world and in an ideal world where the requester never speaks. The
//! statistical distance between the two worlds' observable outcomes is then
//! estimated by sampling or computed exactly by enumeration.

pub mod codec;
pub mod collectors;
pub mod compliance;
pub mod dp;
pub mod exec;
pub mod hidict;
pub mod par;
pub mod rng;
pub mod scenario;
pub mod unlearn;
