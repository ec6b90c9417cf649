pub mod corpus;
pub mod gcn;
pub mod lm;
pub mod metrics;
pub mod par;
pub mod ppo;
pub mod rng;
pub mod tensor;
