#pragma once

#include <cstdint>
#include <map>
#include <string>

// Runtime multiply-accumulate instrumentation. The matmul/linear kernels report
// their products to the innermost active tag while a Recorder is alive on the
// calling thread.
namespace hila::mac {

class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

  const std::map<std::string, std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total(const std::string& tag) const;

 private:
  friend void add(std::uint64_t);
  std::map<std::string, std::uint64_t> counts_;
  Recorder* previous_;
};

class Tag {
 public:
  explicit Tag(std::string tag);
  ~Tag();
  Tag(const Tag&) = delete;
  Tag& operator=(const Tag&) = delete;

 private:
  std::string previous_;
};

void add(std::uint64_t macs);

}  // namespace hila::mac
