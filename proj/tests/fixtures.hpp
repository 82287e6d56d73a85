#pragma once

// Small on-disk benchmarks and scratch directories for integration tests.

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "stylebend/synth_domains.hpp"

namespace sbtest {

inline stylebend::DatasetManifest tiny_manifest() {
    auto m = stylebend::default_manifest();
    m.image_size = 32;
    m.train_classes.resize(2);
    m.test_classes = {{8, stylebend::ShapeKind::Star}, {9, stylebend::ShapeKind::Hexagon}};
    m.targets.resize(2);
    m.train_samples = 16;
    m.test_pool_per_class = 6;
    m.test_episodes = 6;
    m.val_episodes = 4;
    m.shots = {1, 2};
    return m;
}

// Removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("stylebend-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

}  // namespace sbtest
