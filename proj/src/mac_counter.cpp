#include "hila/mac_counter.hpp"

namespace hila::mac {

namespace {
thread_local Recorder* active = nullptr;
thread_local std::string current_tag = "untagged";
}  // namespace

Recorder::Recorder() : previous_(active) { active = this; }
Recorder::~Recorder() { active = previous_; }

std::uint64_t Recorder::total(const std::string& tag) const {
  auto it = counts_.find(tag);
  return it == counts_.end() ? 0 : it->second;
}

Tag::Tag(std::string tag) : previous_(std::move(current_tag)) { current_tag = std::move(tag); }
Tag::~Tag() { current_tag = std::move(previous_); }

void add(std::uint64_t macs) {
  if (active) active->counts_[current_tag] += macs;
}

}  // namespace hila::mac
