//! HTTP session API and command line for the cogedit engine.

pub mod api;
pub mod cli;
pub mod mock_server;
