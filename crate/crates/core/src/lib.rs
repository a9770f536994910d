pub mod corpus;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod senses;
pub mod training;
