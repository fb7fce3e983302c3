//! Core primitives for a two-server metadata-hiding mailbox system.
//!
//! Clients write into secret-shared, encrypted mailboxes using distributed
//! point functions over a 128-bit virtual address space. The servers audit
//! every write with a constant-size secret-shared proof before applying it.
//!
//! * [`field`]: arithmetic in `F_p`, `p = 2^128 - 159`.
//! * [`prf`]: AES-128 streams of field elements.
//! * [`dpf`]: tree DPF with vector payloads.
//! * [`audit`]: sketch computation, SNIP proofs and verification.
//! * [`vault`]: one server's encrypted mailbox store and page table.
//! * [`payload`], [`mac`]: message packing and integrity.
//! * [`wire`]: frame format used between all parties.

pub mod audit;
pub mod dpf;
pub mod field;
pub mod mac;
pub mod payload;
pub mod prf;
pub mod vault;
pub mod wire;

pub use audit::{AuditDecision, AuditReason, AuditSeed, RequestId, ServerSketch, SnipProofShare};
pub use dpf::{DpfKey, DpfParams, EvalMatrix, Party, VirtualAddress};
pub use field::{FieldElement, Modulus, Prime128, TestPrime10007, TestPrime101};
pub use payload::MessageLayout;
pub use vault::{MailboxKey, Vault, VaultError};
pub use wire::{ErrorCode, Message, ProposedOp};
