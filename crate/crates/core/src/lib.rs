//! OTA-Key: two-stage device key provisioning with atomic A/B key updates.
//!
//! Devices leave the factory holding only a per-product-order key. On first
//! contact an agent replaces it with a per-device agent key, and later
//! rotates that key or hands out cloud keys over it. Every key change is
//! written to the spare flash slot before the old copy is erased, so a power
//! cut at any point leaves the device with a key its peer still accepts.

pub mod adversary;
pub mod agent_server;
pub mod clock;
pub mod cloud;
pub mod crypto;
pub mod flash;
pub mod manifest;
pub mod net;
pub mod protocol;
pub mod scenario;
pub mod sim;

pub use agent_server::registry::{ProductOrderRecord, Registry, RegistryEntry};
pub use clock::Clock;
pub use cloud::CloudStub;
pub use crypto::{KeyRng, Nonce, SealedMessage, SymmetricKey};
pub use flash::{FlashImage, KeyKind, KeySlotLayout};
pub use manifest::RunManifest;
pub use protocol::agent::Agent;
pub use protocol::device::{Device, DeviceError, DevicePhase};
pub use protocol::wire::{DeviceId, DeviceIdentity, ProductOrder, ProtocolMessage};
pub use protocol::Flow;
