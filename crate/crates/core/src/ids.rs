use std::fmt;

use serde::{Deserialize, Serialize};

/// Identity of a simulated vehicle. Ids start at 1; 0 is reserved for the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

/// Federated client identity (CID). Vehicles enroll under their own id.
pub type ClientId = VehicleId;

impl VehicleId {
    pub const SERVER: VehicleId = VehicleId(0);
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for VehicleId {
    fn from(v: u32) -> Self {
        VehicleId(v)
    }
}
