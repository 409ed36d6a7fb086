//! Service layer for the mugcat engine: HTTP transport to remote stage
//! backends, the stub stage servers, the REST/WebSocket gateway and the
//! command line.

pub mod cli;
pub mod conformance;
pub mod gateway;
pub mod http;
pub mod stub_server;
