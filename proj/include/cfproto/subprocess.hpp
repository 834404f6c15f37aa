#pragma once

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <string>

#include <fcntl.h>
#include <poll.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "cfproto/error.hpp"

namespace cfproto {

/// Child process running `/bin/sh -c command` with line-oriented pipes on its
/// stdin and stdout. Stderr is inherited. Writing to a dead child raises
/// TransportError rather than SIGPIPE (SIGPIPE is ignored process-wide once a
/// Subprocess is created).
class Subprocess {
public:
    explicit Subprocess(const std::string& command) {
        std::signal(SIGPIPE, SIG_IGN);
        int in_pipe[2];
        int out_pipe[2];
        if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw TransportError("pipe() failed");
        if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
            ::close(in_pipe[0]);
            ::close(in_pipe[1]);
            throw TransportError("pipe() failed");
        }
        pid_ = ::fork();
        if (pid_ < 0) {
            for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
            throw TransportError("fork() failed");
        }
        if (pid_ == 0) {
            ::dup2(in_pipe[0], STDIN_FILENO);
            ::dup2(out_pipe[1], STDOUT_FILENO);
            ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            ::_exit(127);
        }
        ::close(in_pipe[0]);
        ::close(out_pipe[1]);
        to_child_ = in_pipe[1];
        from_child_ = out_pipe[0];
    }

    Subprocess(const Subprocess&) = delete;
    Subprocess& operator=(const Subprocess&) = delete;

    ~Subprocess() { terminate(); }

    void write_line(const std::string& line) {
        std::string buf = line;
        buf.push_back('\n');
        std::size_t off = 0;
        while (off < buf.size()) {
            const auto n = ::write(to_child_, buf.data() + off, buf.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw TransportError(std::string("write to model process failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
                std::string line = buffer_.substr(0, pos);
                buffer_.erase(0, pos + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0) throw TransportError("model process timed out");
            pollfd pfd{from_child_, POLLIN, 0};
            const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw TransportError("poll() failed");
            }
            if (rc == 0) throw TransportError("model process timed out");
            char chunk[65536];
            const auto n = ::read(from_child_, chunk, sizeof(chunk));
            if (n < 0) {
                if (errno == EINTR) continue;
                throw TransportError("read from model process failed");
            }
            if (n == 0) throw TransportError("model process closed its output");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    /// Closes the child's stdin and waits for it, killing it after a grace period.
    void terminate() {
        if (pid_ <= 0) return;
        if (to_child_ >= 0) ::close(to_child_);
        to_child_ = -1;
        int status = 0;
        for (int i = 0; i < 200; ++i) {
            if (::waitpid(pid_, &status, WNOHANG) == pid_) {
                pid_ = -1;
                break;
            }
            ::usleep(5000);
        }
        if (pid_ > 0) {
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
            pid_ = -1;
        }
        if (from_child_ >= 0) ::close(from_child_);
        from_child_ = -1;
    }

private:
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::string buffer_;
};

}  // namespace cfproto
