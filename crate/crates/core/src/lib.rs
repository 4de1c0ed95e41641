//! Intercostal ultrasound scanning simulator and a dueling double deep
//! Q-learning planner for shadow-aware scanning trajectories.

pub mod acoustics;
pub mod agent;
pub mod geometry;
pub mod mdp;
pub mod replay;
pub mod run;
pub mod scene;
pub mod seeding;
