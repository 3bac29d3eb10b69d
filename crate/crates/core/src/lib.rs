//! Generalized metriplectic systems: polynomial algebra, simulation, SOS
//! metric certificates and alternating convex identification.

pub mod dynamics;
pub mod poly;
pub mod sos;
pub mod sysid;
