pub mod numerics;
pub mod posterior;
pub mod hindex;
pub mod policy;
pub mod bernoulli;
pub mod evalbench;
