//! Detection of RTB winning-price notifications in weblogs, modeling of
//! encrypted charge prices, and per-user accounting of what advertisers paid.

pub mod cost;
pub mod domain;
pub mod features;
pub mod ingest;
pub mod model;
pub mod money;
pub mod nurl;
pub mod pipeline;
pub mod planner;
pub mod sim;
