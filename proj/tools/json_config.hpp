// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>

namespace cvlm::tools {

// Reads --config files as JSON. Nested objects address subcommands:
// {"generate": {"temperature": 0.7}}. Flags on the command line win.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool write_description,
                        std::string prefix) const override;
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override;
};

}  // namespace cvlm::tools
