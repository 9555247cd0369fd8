#include "tdm/log.hpp"

#include <iostream>
#include <mutex>

namespace tdm {
namespace {

struct WarningSink {
    std::mutex mutex;
    std::vector<std::string> records;
    bool echo = false;
};

WarningSink& sink() {
    static WarningSink instance;
    return instance;
}

}  // namespace

void record_warning(std::string message) {
    auto& s = sink();
    std::lock_guard lock(s.mutex);
    if (s.echo) std::cerr << "warning: " << message << '\n';
    s.records.push_back(std::move(message));
}

std::vector<std::string> warnings() {
    auto& s = sink();
    std::lock_guard lock(s.mutex);
    return s.records;
}

std::size_t warning_count() {
    auto& s = sink();
    std::lock_guard lock(s.mutex);
    return s.records.size();
}

void clear_warnings() {
    auto& s = sink();
    std::lock_guard lock(s.mutex);
    s.records.clear();
}

void set_warning_echo(bool echo) {
    auto& s = sink();
    std::lock_guard lock(s.mutex);
    s.echo = echo;
}

}  // namespace tdm
