// Copyright 2026 The imgforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Interpreter for Pifiles: declarative recipes that turn a stock
//! single-board-computer OS image into a customized one.
//!
//! A build runs in three stages. `setup` obtains the source image and
//! copies it to the destination, `prepare` grows it (`PUMP`), and `chroot`
//! mounts it and runs the `RUN`/`HOST`/`INSTALL`/`PATH` steps inside it.
//! All side effects go through an [`executor::Executor`], so any build can
//! be recorded as a dry-run log instead.

pub mod cli;
pub mod executor;
pub mod image;
pub mod mounts;
pub mod parser;
pub mod plan;
pub mod source;
