//! Deterministic lane-queue traffic simulator.
//!
//! Each lane holds vehicles in transit (counting down the lane's free-flow
//! time) followed by a FIFO queue at the stop line. On green, a movement
//! releases queued vehicles at the lane's saturation flow into the next lane
//! of their route, provided that lane has room.

mod network;
mod sim;

pub use network::*;
pub use sim::*;
