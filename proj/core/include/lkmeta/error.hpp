// Copyright 2026 The lkmeta Authors. All Rights Reserved.
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

#ifndef LKMETA_ERROR_HPP_
#define LKMETA_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace lkmeta {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or channel mismatch. The message names the offending axis.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Kernel geometry an operation cannot handle (even extents, oversized pads).
class UnsupportedKernelError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration document. The message carries a JSON path.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed configuration that breaks a structural rule.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or truncated binary input.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lkmeta

#endif  // LKMETA_ERROR_HPP_
