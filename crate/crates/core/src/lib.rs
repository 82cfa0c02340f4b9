//! Collaborative intrusion detection for low-altitude IoT swarms: traffic
//! imaging, a diffusion-pretrained feature memory, advisor-guided swarm
//! feature selection and a resource-aware classifier pool, driven by an
//! event loop over a simulated swarm.

pub mod advisor;
pub mod classify;
pub mod diffusion;
pub mod harness;
pub mod imaging;
pub mod ingest;
pub mod orchestrator;
pub mod pso_select;
pub mod swarm_env;
mod util;
