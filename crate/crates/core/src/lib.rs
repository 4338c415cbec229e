//! A deterministic discrete-event simulator for service-oriented community
//! routing in ad hoc networks.
//!
//! Nodes host *machines*, each running a *culture*: one art per network
//! layer. A node that starts a service floods an announcement; interested
//! nodes join, and the resulting community keeps source-routed tables among
//! its members only. Non-members still relay.
//!
//! ```
//! use hamanet::scenario::parse_scenario;
//! use hamanet::sim::{run, RunOptions};
//!
//! let world = parse_scenario(r#"
//! [topology]
//! nodes = ["N1", "N2", "N3"]
//! edges = ["N1-N2-N3"]
//!
//! [[culture]]
//! name = "File service"
//! application = "FTP"
//!
//! [interest]
//! N3 = ["File service"]
//!
//! [[step]]
//! at = 0
//! action = "start_service"
//! node = "N1"
//! culture = "File service"
//! "#).unwrap();
//! let out = run(&world, 1, RunOptions::default());
//! assert_eq!(out.report.society["C1"], "File service");
//! assert_eq!(out.report.tables["N3"]["C1"], ["N1/0 N3-N2-N1"]);
//! ```

pub mod cli;
pub mod community;
pub mod fabric;
pub mod model;
pub mod routing;
pub mod scenario;
pub mod services;
pub mod sim;

pub use community::{CommunityError, CommunityView};
pub use fabric::{ArtDef, ArtRegistry, CultureDef, Layer, MachineHost, MachineInstance};
pub use model::{CommunityId, CommunityTable, MachineId, NodeId, PacketEnvelope, PacketKind, Path, SocietyTable};
pub use routing::RoutingError;
pub use scenario::{load_scenario, parse_scenario, World};
pub use services::{compare_overhead, ServiceError};
pub use sim::{run, Mode, Report, RunOptions, Simulation};

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/communities.md")]
    mod communities {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/services.md")]
    mod services {}
    #[doc = include_str!("../../../book/src/adversaries.md")]
    mod adversaries {}
    #[doc = include_str!("../../../book/src/determinism.md")]
    mod determinism {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
